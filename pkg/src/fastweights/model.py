"""Fast-weight metalearner: slow encoder + fast/slow augmented layers.

An episode runs in two phases. :meth:`FastWeightModel.describe` binds the
labelled description set into the fast-weight memories, either by the Hebbian
outer-product rule or by mapping the description-set loss gradient through a
learned coordinate-wise function. :meth:`FastWeightModel.predict` then reads
those memories for unlabelled queries.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .episodes import RandomStream
from .errors import ConfigurationError, InputError, LabelError, ProtocolError
from .memory import LabelProjector, LAMemory
from .tensor import Tensor

ENCODERS = ("cnn_small", "mlp", "identity")
BINDINGS = ("hebb", "gradmap")
PLACEMENTS = ("fc_layer", "softmax_only_fast", "softmax_fast_and_slow", "fc_and_softmax")
SOFTMAX_PLACEMENTS = ("softmax_only_fast", "softmax_fast_and_slow", "fc_and_softmax")


@dataclass(frozen=True)
class ModelSpec:
    encoder: str = "mlp"
    binding: str = "hebb"
    fast_placement: str = "fc_layer"
    truncate_through_rule: bool = False
    n_way: int = 5
    k_shot: int = 1
    d_L: int = 288
    noise_halfwidth: float = 0.0
    leaky_slope: float = 0.2
    seed: int = 0
    # empty means "take it from the dataset"
    input_shape: tuple[int, ...] = ()
    mlp_hidden: tuple[int, ...] = (64,)
    cnn_filters: int = 64
    cnn_layers: int = 5
    # False drops layer L entirely (encoder feeds the softmax layer directly)
    hidden_layer: bool = True
    fc_slow_path: bool = True
    eta: float = 1.0
    trainable_eta: bool = False
    trainable_R: bool = False
    gradmap_hidden: tuple[int, ...] = (40, 40)
    gradmap_out_scale: float = 0.01
    # differentiate the outer loss through the description-set gradient too
    gradmap_second_order: bool = False

    def replace(self, **changes) -> ModelSpec:
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ConfigurationError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.binding not in BINDINGS:
            raise ConfigurationError(f"binding must be one of {BINDINGS}, got {self.binding!r}")
        if self.fast_placement not in PLACEMENTS:
            raise ConfigurationError(
                f"fast_placement must be one of {PLACEMENTS}, got {self.fast_placement!r}")
        if self.n_way < 2 or self.k_shot < 1 or self.d_L <= 0:
            raise ConfigurationError(
                f"need n_way >= 2, k_shot >= 1, d_L > 0 (got {self.n_way}, {self.k_shot}, "
                f"{self.d_L})")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigurationError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if not self.input_shape:
            raise ConfigurationError("input_shape is unset")
        if self.fast_placement in ("fc_layer", "fc_and_softmax") and not self.hidden_layer:
            raise ConfigurationError(f"{self.fast_placement} needs the hidden FC layer")
        if self.fast_placement in ("fc_layer", "fc_and_softmax"):
            if not self.fc_slow_path and self.binding == "gradmap":
                raise ConfigurationError("gradmap binding needs a slow path in the fast layer")
        if self.fast_placement == "softmax_only_fast" and self.binding == "gradmap":
            raise ConfigurationError("gradmap binding needs a slow path in the fast layer")
        if self.encoder == "cnn_small" and len(self.input_shape) != 3:
            raise ConfigurationError(f"cnn_small expects C x H x W input, got {self.input_shape}")
        if self.encoder != "cnn_small" and len(self.input_shape) != 1:
            raise ConfigurationError(
                f"{self.encoder} expects vector input, got {self.input_shape}")


def he_normal(rng: RandomStream, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# -- encoders ---------------------------------------------------------------

class IdentityEncoder:
    def __init__(self, spec: ModelSpec, rng: RandomStream):
        self.input_shape = spec.input_shape
        self.out_dim = int(np.prod(spec.input_shape))
        self.params: dict[str, Tensor] = {}

    def __call__(self, x: Tensor) -> Tensor:
        return x


class MLPEncoder:
    def __init__(self, spec: ModelSpec, rng: RandomStream):
        self.input_shape = spec.input_shape
        self.slope = spec.leaky_slope
        self.params = {}
        d = spec.input_shape[0]
        for i, width in enumerate(spec.mlp_hidden):
            self.params[f"encoder.l{i}.W"] = Tensor(he_normal(rng, (d, width), d), True)
            self.params[f"encoder.l{i}.b"] = Tensor(np.zeros(width), True)
            d = width
        self.out_dim = d

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(len(self.params) // 2):
            x = T.leaky_relu(x @ self.params[f"encoder.l{i}.W"] + self.params[f"encoder.l{i}.b"],
                             self.slope)
        return x


class CNNEncoder:
    """Blocks of conv3x3 (same padding) -> leaky ReLU -> 2x2 max-pool, then flatten."""

    def __init__(self, spec: ModelSpec, rng: RandomStream):
        self.input_shape = spec.input_shape
        self.slope = spec.leaky_slope
        self.n_layers = spec.cnn_layers
        self.params = {}
        c, h, w = spec.input_shape
        for i in range(spec.cnn_layers):
            f = spec.cnn_filters
            self.params[f"encoder.conv{i}.w"] = Tensor(he_normal(rng, (f, c, 3, 3), c * 9), True)
            self.params[f"encoder.conv{i}.b"] = Tensor(np.zeros((f, 1, 1)), True)
            c, h, w = f, (h + 1) // 2, (w + 1) // 2
        self.out_dim = c * h * w

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = T.conv2d(x, self.params[f"encoder.conv{i}.w"], pad=1)
            x = T.leaky_relu(x + self.params[f"encoder.conv{i}.b"], self.slope)
            x = T.maxpool2x2(x)
        return T.flatten(x, start=1)


_ENCODER_TYPES = {"identity": IdentityEncoder, "mlp": MLPEncoder, "cnn_small": CNNEncoder}


# -- layers -----------------------------------------------------------------

class FastSlowLayer:
    """``h = act(h_prev W + b) + act(h_prev M)`` with either path switchable off.

    The fast path has no bias; ``M`` lives in ``self.mem`` and is rebuilt every
    episode.
    """

    def __init__(self, name: str, d_in: int, d_out: int, activation: str, *,
                 use_slow: bool, use_fast: bool, rng: RandomStream, slope: float = 0.2,
                 eta: float | Tensor = 1.0):
        if not (use_slow or use_fast):
            raise ConfigurationError(f"layer {name}: both paths disabled")
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.activation = activation
        self.slope = slope
        self.use_slow, self.use_fast = use_slow, use_fast
        self.params: dict[str, Tensor] = {}
        if use_slow:
            self.W = Tensor(he_normal(rng, (d_in, d_out), d_in), True, f"{name}.W")
            self.b = Tensor(np.zeros(d_out), True, f"{name}.b")
            self.params = {f"{name}.W": self.W, f"{name}.b": self.b}
        self.mem = LAMemory(d_in, d_out, eta) if use_fast else None

    def act(self, x: Tensor) -> Tensor:
        return T.leaky_relu(x, self.slope) if self.activation == "leaky" else x

    def act_slope_mask(self, pre: Tensor) -> Tensor:
        """Derivative of the activation at ``pre``, as a constant tensor."""
        if self.activation == "leaky":
            return Tensor(np.where(pre.data > 0, 1.0, self.slope))
        return Tensor(np.ones_like(pre.data))

    def slow_pre(self, h: Tensor) -> Tensor:
        return h @ self.W + self.b

    def forward(self, h: Tensor, fast: bool = True) -> Tensor:
        if h.shape[-1] != self.d_in:
            raise InputError(f"layer {self.name}: expected width {self.d_in}, got {h.shape}")
        out = None
        if self.use_slow:
            out = self.act(self.slow_pre(h))
        if self.use_fast and fast:
            f = self.act(self.mem.read(h))
            out = f if out is None else out + f
        if out is None:
            raise ConfigurationError(f"layer {self.name}: no path enabled for this forward")
        return out


def fast_slow_forward(layer: FastSlowLayer, h_prev: Tensor) -> Tensor:
    return layer.forward(h_prev)


class GradMapper:
    """Scalar MLP ``g`` applied independently to every fast-weight coordinate."""

    def __init__(self, hidden: tuple[int, ...], rng: RandomStream, slope: float = 0.2,
                 out_scale: float = 0.01):
        self.slope = slope
        self.params = {}
        widths = (1,) + tuple(hidden) + (1,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = he_normal(rng, (a, b), a)
            if i == len(widths) - 2:
                w *= out_scale
            self.params[f"gradmap.W{i}"] = Tensor(w, True)
            self.params[f"gradmap.b{i}"] = Tensor(np.zeros(b), True)
        self.n_layers = len(widths) - 1

    def __call__(self, G: Tensor) -> Tensor:
        x = T.reshape(G, (-1, 1))
        for i in range(self.n_layers):
            x = x @ self.params[f"gradmap.W{i}"] + self.params[f"gradmap.b{i}"]
            if i < self.n_layers - 1:
                x = T.leaky_relu(x, self.slope)
        return T.reshape(x, G.shape)


# -- full model -------------------------------------------------------------

class FastWeightModel:
    def __init__(self, spec: ModelSpec, rng: RandomStream | None = None):
        spec.validate()
        self.spec = spec
        rng = rng if rng is not None else RandomStream(spec.seed, "init")
        slope = spec.leaky_slope
        self.encoder = _ENCODER_TYPES[spec.encoder](spec, rng)
        self.eta: float | Tensor = (Tensor(np.array(spec.eta), True, "eta")
                                    if spec.trainable_eta else spec.eta)
        place = spec.fast_placement
        self.head: list[FastSlowLayer] = []
        width = self.encoder.out_dim
        self.fc = None
        if spec.hidden_layer:
            fc_fast = place in ("fc_layer", "fc_and_softmax")
            self.fc = FastSlowLayer("fc", width, spec.d_L, "leaky",
                                    use_slow=spec.fc_slow_path or not fc_fast,
                                    use_fast=fc_fast, rng=rng, slope=slope, eta=self.eta)
            self.head.append(self.fc)
            width = spec.d_L
        self.out = FastSlowLayer("out", width, spec.n_way, "identity",
                                 use_slow=place != "softmax_only_fast",
                                 use_fast=place in SOFTMAX_PLACEMENTS, rng=rng, slope=slope,
                                 eta=self.eta)
        self.head.append(self.out)
        self.projector = None
        if self.fc is not None and self.fc.use_fast:
            self.projector = LabelProjector(spec.n_way, spec.d_L, rng, spec.noise_halfwidth,
                                            trainable=spec.trainable_R)
        self.gradmap = (GradMapper(spec.gradmap_hidden, rng, slope, spec.gradmap_out_scale)
                        if spec.binding == "gradmap" else None)
        self._described = False

    # parameters ----------------------------------------------------------

    def state(self) -> dict[str, Tensor]:
        """Every persistent tensor, trainable or frozen, in a fixed order."""
        out = dict(self.encoder.params)
        for layer in self.head:
            out.update(layer.params)
        if self.projector is not None:
            out["fc.R"] = self.projector.R
        if isinstance(self.eta, Tensor):
            out["eta"] = self.eta
        if self.gradmap is not None:
            out.update(self.gradmap.params)
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Trainable slow parameters. Fast weights are never included."""
        return {k: v for k, v in self.state().items() if v.requires_grad}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.state()
        if set(arrays) != set(state):
            raise ConfigurationError(
                f"state mismatch: missing {sorted(set(state) - set(arrays))}, "
                f"unexpected {sorted(set(arrays) - set(state))}")
        for k, t in state.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ConfigurationError(f"{k}: shape {a.shape} != {t.shape}")
            t.data = a.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in self.state().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def fast_layers(self) -> list[FastSlowLayer]:
        return [layer for layer in self.head if layer.use_fast]

    # episode protocol ----------------------------------------------------

    def reset(self) -> None:
        for layer in self.fast_layers():
            layer.mem.reset()
        self._described = False

    def encode(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        shape = tuple(self.spec.input_shape)
        if x.shape[1:] != shape:
            if x.shape == shape:
                x = T.reshape(x, (1,) + shape)
            else:
                raise InputError(f"expected input of shape (N, {shape}), got {x.shape}")
        return self.encoder(x)

    def describe(self, x, y, rng: RandomStream | None = None, train: bool = False) -> None:
        """Bind description inputs ``x`` to task-local labels ``y``.

        Label noise on pseudovalues is drawn from ``rng`` only when ``train``.
        """
        if self._described:
            raise ProtocolError("describe called twice without reset")
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if np.any(y < 0) or np.any(y >= self.spec.n_way):
            raise LabelError(f"description labels {y.tolist()} outside 0..{self.spec.n_way - 1}")
        if len(y):
            keys = self.encode(x)
            if self.spec.binding == "hebb":
                self._describe_hebb(keys, y, rng, train)
            else:
                self._describe_gradmap(keys, y)
        self._described = True

    def _values(self, layer: FastSlowLayer, y: np.ndarray, rng, train: bool) -> Tensor:
        if layer is self.fc:
            return self.projector.project(y, rng, noise=train)
        return Tensor(np.eye(self.spec.n_way)[y])

    def _describe_hebb(self, keys: Tensor, y, rng, train) -> None:
        fast = self.fast_layers()
        for layer in self.head:
            if layer.use_fast:
                values = self._values(layer, y, rng, train)
                if self.spec.truncate_through_rule:
                    layer.mem.write_many(T.detach(keys), T.detach(values))
                else:
                    layer.mem.write_many(keys, values)
            if layer is fast[-1]:
                break
            keys = layer.forward(keys)

    def inner_gradients(self, keys: Tensor, y) -> dict[str, Tensor]:
        """Gradient of the summed slow-path description loss w.r.t. each fast layer's ``W``.

        Equals the sum of per-example gradients. It is written as forward ops,
        so with ``gradmap_second_order`` the outer loss differentiates through it.
        """
        acts, pres = [keys], []
        for layer in self.head:
            pre = layer.slow_pre(acts[-1])
            pres.append(pre)
            acts.append(layer.act(pre))
        delta = T.softmax(acts[-1]) - Tensor(np.eye(self.spec.n_way)[y])
        grads = {}
        for i in range(len(self.head) - 1, -1, -1):
            layer = self.head[i]
            if i < len(self.head) - 1:
                delta = delta * layer.act_slope_mask(pres[i])
            if layer.use_fast:
                grads[layer.name] = T.transpose(acts[i]) @ delta
            if i > 0:
                delta = delta @ T.transpose(layer.W)
        return grads

    def _describe_gradmap(self, keys: Tensor, y) -> None:
        grads = self.inner_gradients(keys, y)
        for layer in self.fast_layers():
            G = grads[layer.name]
            if not self.spec.gradmap_second_order:
                G = T.detach(G)
            M = self.gradmap(G)
            if self.spec.truncate_through_rule:
                M = T.detach(M)
            layer.mem.assign(M, count=len(y))

    def predict(self, x) -> Tensor:
        """Logits of shape ``(N, n_way)`` for query inputs."""
        if not self._described:
            raise ProtocolError("predict called before describe")
        h = self.encode(x)
        for layer in self.head:
            h = layer.forward(h)
        return h


def describe_hebb(model: FastWeightModel, D, rng=None, train=False) -> None:
    """Hebbian description phase over a list of ``(input, label)`` pairs."""
    if model.spec.binding != "hebb":
        raise ConfigurationError("describe_hebb needs binding = hebb")
    _describe_pairs(model, D, rng, train)


def describe_gradmap(model: FastWeightModel, D) -> None:
    if model.spec.binding != "gradmap":
        raise ConfigurationError("describe_gradmap needs binding = gradmap")
    _describe_pairs(model, D, None, False)


def _describe_pairs(model, D, rng, train):
    D = list(D)
    shape = (len(D),) + tuple(model.spec.input_shape)
    xs = (T.concatenate([T.reshape(T.as_tensor(x), (1,) + shape[1:]) for x, _ in D])
          if D else Tensor(np.zeros(shape)))
    model.describe(xs, [y for _, y in D], rng, train)


def predict(model: FastWeightModel, x) -> Tensor:
    return model.predict(x)
