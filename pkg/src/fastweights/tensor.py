"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the tape that is active in the current thread::

    tape = Tape()
    with tape:
        loss = sum(leaky_relu(x @ w, 0.2))
    tape.backward(loss)
    w.grad

Outside an active tape every operation is a plain numpy computation and the
result carries no graph linkage, which is how evaluation runs.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, RankError

_local = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may participate in one differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> Tensor:
        return sum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive operations for one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _links(self, t: Tensor) -> bool:
        return t.requires_grad and (t.node_id is None or t._tape is self)

    def record(self, out_data, inputs, backward, op) -> Tensor:
        out = Tensor(out_data, requires_grad=True)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(out, tuple(inputs), backward, op))
        return out

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` of every tensor on this tape with d(root)/d(tensor).

        Gradients accumulate across calls; reset them with ``zero_grad``.
        """
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self or root.node_id is None:
            raise ContractError("backward root was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            _accumulate(node.out, g)
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id is not None and t._tape is self:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
                elif t.node_id is None:
                    _accumulate(t, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def _make(out_data, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    tape = active_tape()
    if tape is not None and any(tape._links(t) for t in inputs):
        return tape.record(out_data, inputs, backward, op)
    return Tensor(out_data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    d = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * d, (x,), lambda g: (g * d,), "leaky_relu")


# -- shape ------------------------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise RankError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor, start: int = 0) -> Tensor:
    """Collapse dimensions ``start..`` into one (``start=1`` keeps a batch axis)."""
    return reshape(a, a.shape[:start] + (-1,))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: np.split(g, cuts, axis=axis), "concatenate")


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / float(n))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands, following numpy semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise RankError(f"matmul supports rank 1 or 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]

    def bw(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return ((g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def outer(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise RankError(f"outer expects two vectors, got {u.shape} and {v.shape}")
    return _make(np.outer(u.data, v.data), (u, v),
                 lambda g: (g @ v.data, u.data @ g), "outer")


# -- convolutional ----------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, pad: int = 1) -> Tensor:
    """3x3 cross-correlation of ``C_in x H x W`` (or ``N x C_in x H x W``) input.

    Output extent is ``H + 2*pad - 2``. Computed through an im2col view; the
    result equals the direct nested-loop definition.
    """
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d kernel must be C_out x C_in x 3 x 3, got {w.shape}")
    if pad not in (0, 1):
        raise ContractError(f"conv2d pad must be 0 or 1, got {pad}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise RankError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    if c != w.shape[1]:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {w.shape[1]} "
                             f"(input {x.shape}, kernel {w.shape})")
    ho, wo = h + 2 * pad - 2, wd + 2 * pad - 2
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: input {x.shape} too small for a 3x3 kernel")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    wmat = w.data.reshape(w.shape[0], c * 9)
    out = (cols @ wmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def bw(g):
        g = np.asarray(g).reshape(n, -1, ho, wo)
        gflat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        gw = (gflat.T @ cols).reshape(w.shape)
        gcols = (gflat @ wmat).reshape(n, ho, wo, c, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx if batched else gx[0], gw)

    return _make(np.ascontiguousarray(out if batched else out[0]), (x, w), bw, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes.

    Odd extents are padded with -inf, giving ``ceil(H/2) x ceil(W/2)``. The
    gradient goes to the first maximal element of each window in row-major
    order.
    """
    if x.ndim < 2:
        raise RankError(f"maxpool2x2 needs at least two axes, got {x.shape}")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    hp, wp = h + h % 2, w + w % 2
    xd = x.data
    if (hp, wp) != (h, w):
        widths = [(0, 0)] * len(lead) + [(0, hp - h), (0, wp - w)]
        xd = np.pad(xd, widths, constant_values=-np.inf)
    blocks = xd.reshape(lead + (hp // 2, 2, wp // 2, 2))
    k = len(lead)
    blocks = np.moveaxis(blocks, k + 1, k + 2).reshape(lead + (hp // 2, wp // 2, 4))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]) * np.asarray(g)[..., None]
        full = onehot.reshape(lead + (hp // 2, wp // 2, 2, 2))
        full = np.moveaxis(full, k + 2, k + 1).reshape(lead + (hp, wp))
        return (full[..., :h, :w],)

    return _make(out, (x,), bw, "maxpool2x2")


# -- classification ---------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    p = _softmax(x.data)
    return _make(p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),),
                 "softmax")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Cross-entropy ``-log softmax(logits)[target]``.

    With ``N x C`` logits and ``N`` targets, the per-row losses are summed.
    """
    if logits.ndim not in (1, 2):
        raise RankError(f"logits must be rank 1 or 2, got {logits.shape}")
    z = logits.data if logits.ndim == 2 else logits.data[None]
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (z.shape[0],) or not np.issubdtype(t.dtype, np.integer):
        raise ContractError(f"expected {z.shape[0]} integer targets, got {target!r}")
    n, c = z.shape
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"target {target!r} out of range for {c} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.sum(logsumexp - shifted[np.arange(n), t]))

    def bw(g):
        d = _softmax(z)
        d[np.arange(n), t] -= 1.0
        return ((g * d).reshape(logits.shape),)

    return _make(np.array(loss), (logits,), bw, "softmax_cross_entropy")


def detach(x: Tensor) -> Tensor:
    """Value-equal tensor with no tape linkage; gradient flow stops here."""
    return Tensor(x.data.copy())
