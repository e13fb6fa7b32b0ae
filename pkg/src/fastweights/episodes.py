"""Task distributions: N-way K-shot episodes over disjoint class splits."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CapacityError, ContractError, GenerationError, IntegrityError,
                     SamplingError)
from .tensor import Tensor


class RandomStream:
    """Seeded PCG64 stream whose full state can be saved and restored.

    Named child streams (``RandomStream(seed, "noise")``) are derived from the
    seed and a CRC of the name, so they are stable across runs and platforms.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed)
        self.name = name
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF]
        if name:
            entropy.append(zlib.crc32(name.encode()))
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
        self.draws = 0

    def _tick(self):
        self.draws += 1
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._tick().uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._tick().normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._tick().integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._tick().choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._tick().permutation(x)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "algorithm": self.algorithm, "seed": self.seed, "name": self.name,
            "draws": self.draws,
            "state": str(st["state"]["state"]), "inc": str(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"]),
        }

    def set_state(self, s: dict) -> None:
        if s["algorithm"] != self.algorithm:
            raise IntegrityError(f"unsupported stream algorithm {s['algorithm']!r}")
        self.seed, self.name, self.draws = int(s["seed"]), s["name"], int(s["draws"])
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(s["state"]), "inc": int(s["inc"])},
            "has_uint32": int(s["has_uint32"]), "uinteger": int(s["uinteger"]),
        }

    @classmethod
    def from_state(cls, s: dict) -> RandomStream:
        r = cls(int(s["seed"]), s["name"])
        r.set_state(s)
        return r


# -- datasets ---------------------------------------------------------------

class ArrayDataset:
    """Examples held as one array of shape ``(n_classes, per_class, *input_shape)``."""

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data)
        if self.data.ndim < 3:
            raise ContractError(f"dataset array needs >= 3 axes, got {self.data.shape}")

    @property
    def n_classes(self) -> int:
        return self.data.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.data.shape[2:]

    def count(self, c: int) -> int:
        return self.data.shape[1]

    def get(self, c: int, idx) -> np.ndarray:
        return np.asarray(self.data[c, idx], dtype=np.float64)


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]
    val_classes: tuple[int, ...] = ()

    def __post_init__(self):
        parts = [set(self.train_classes), set(self.test_classes), set(self.val_classes)]
        if (parts[0] & parts[1]) or (parts[0] & parts[2]) or (parts[1] & parts[2]):
            raise ContractError("class splits must be pairwise disjoint")

    def get(self, name: str) -> tuple[int, ...]:
        try:
            return {"train": self.train_classes, "val": self.val_classes,
                    "test": self.test_classes}[name]
        except KeyError:
            raise ContractError(f"unknown split {name!r}") from None

    @classmethod
    def random(cls, n_classes: int, n_train: int, n_val: int, n_test: int,
               rng: RandomStream) -> ClassSplit:
        if n_train + n_val + n_test > n_classes:
            raise SamplingError(f"split {n_train}+{n_val}+{n_test} exceeds {n_classes} classes")
        order = [int(c) for c in rng.permutation(n_classes)]
        return cls(tuple(sorted(order[:n_train])),
                   tuple(sorted(order[n_train + n_val:n_train + n_val + n_test])),
                   tuple(sorted(order[n_train:n_train + n_val])))


@dataclass
class Episode:
    """One sampled task: a labelled description set and held-out queries."""

    description_x: np.ndarray
    description_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    class_map: tuple[int, ...]
    description_ids: list[tuple[int, int]] = field(default_factory=list)
    query_ids: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def description(self) -> list[tuple[Tensor, int]]:
        return [(Tensor(x), int(y)) for x, y in zip(self.description_x, self.description_y)]

    @property
    def queries(self) -> list[tuple[Tensor, int]]:
        return [(Tensor(x), int(y)) for x, y in zip(self.query_x, self.query_y)]


def sample_episode(pool, split, n_way: int, k_shot: int, n_query: int,
                   rng: RandomStream) -> Episode:
    """Uniformly sample an N-way K-shot task with ``n_query`` queries per class.

    ``split`` is a sequence of global class ids. Task-local labels are a random
    permutation of the chosen classes.
    """
    classes = np.asarray(sorted(split))
    if len(classes) < n_way:
        raise SamplingError(f"split has {len(classes)} classes, need {n_way} "
                            f"(short by {n_way - len(classes)})")
    chosen = rng.choice(classes, size=n_way, replace=False)
    chosen = chosen[rng.permutation(n_way)]
    need = k_shot + n_query
    dx, dy, qx, qy, dids, qids = [], [], [], [], [], []
    for label, c in enumerate(chosen):
        c = int(c)
        have = pool.count(c)
        if have < need:
            raise SamplingError(f"class {c} has {have} examples, need {need} "
                                f"(short by {need - have})")
        idx = rng.choice(have, size=need, replace=False)
        xs = pool.get(c, idx)
        dx.append(xs[:k_shot])
        qx.append(xs[k_shot:])
        dy += [label] * k_shot
        qy += [label] * n_query
        dids += [(c, int(i)) for i in idx[:k_shot]]
        qids += [(c, int(i)) for i in idx[k_shot:]]
    shape = pool.input_shape
    return Episode(
        description_x=np.concatenate(dx).reshape((n_way * k_shot,) + shape),
        description_y=np.asarray(dy, dtype=np.int64),
        query_x=np.concatenate(qx).reshape((n_way * n_query,) + shape),
        query_y=np.asarray(qy, dtype=np.int64),
        class_map=tuple(int(c) for c in chosen),
        description_ids=dids, query_ids=qids,
    )


# -- synthetic task families ------------------------------------------------

def synth_orthogonal_tasks(n_classes: int, d: int, rng: RandomStream, *,
                           per_class: int = 20, sigma: float = 0.05, scale: float = 1.0,
                           basis: str = "standard") -> ArrayDataset:
    """Classes centred on scaled orthonormal prototypes plus Gaussian jitter."""
    if n_classes > d:
        raise CapacityError(f"{n_classes} orthogonal prototypes do not fit in d={d}")
    if basis == "standard":
        protos = np.eye(d)[:n_classes]
    elif basis == "random":
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        protos = q.T[:n_classes]
    else:
        raise ContractError(f"unknown basis {basis!r}")
    protos = scale * protos
    data = np.repeat(protos[:, None, :], per_class, axis=1)
    if sigma > 0:
        data = data + rng.normal(0.0, sigma, size=data.shape)
    return ArrayDataset(data)


def synth_cluster_tasks(n_classes: int, d: int, separation: float, rng: RandomStream, *,
                        per_class: int = 20, sigma: float = 0.25,
                        max_attempts: int = 10_000) -> ArrayDataset:
    """Gaussian clusters around unit-norm means at pairwise distance >= separation."""
    if separation <= 0:
        raise ContractError(f"separation must be positive, got {separation}")
    means: list[np.ndarray] = []
    attempts = 0
    while len(means) < n_classes:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(f"placed {len(means)}/{n_classes} cluster means after "
                                  f"{max_attempts} attempts at separation {separation}")
        m = rng.normal(size=d)
        m /= np.linalg.norm(m)
        if all(np.linalg.norm(m - o) >= separation for o in means):
            means.append(m)
    mu = np.stack(means)
    return ArrayDataset(mu[:, None, :] + rng.normal(0.0, sigma, size=(n_classes, per_class, d)))


# -- flat binary dataset file -----------------------------------------------

_DS_MAGIC = b"FWDS1"
_DS_HEADER = struct.Struct("<5sIII")


def save_dataset(ds: ArrayDataset, path) -> None:
    """Write a vector dataset as ``FWDS1`` header + little-endian f64 payload."""
    if len(ds.input_shape) != 1:
        raise ContractError(f"only vector datasets serialise, got input shape {ds.input_shape}")
    n, per, d = ds.data.shape
    payload = np.ascontiguousarray(ds.data, dtype="<f8").tobytes()
    Path(path).write_bytes(_DS_HEADER.pack(_DS_MAGIC, n, d, per) + payload)


def load_dataset(path) -> ArrayDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, n, d, per = _DS_HEADER.unpack_from(raw)
    if magic != _DS_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    body = raw[_DS_HEADER.size:]
    if len(body) != 8 * n * d * per:
        raise IntegrityError(f"{path}: payload is {len(body)} bytes, expected {8 * n * d * per}")
    return ArrayDataset(np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n, per, d))
