"""Hebbian fast weights as a linear associative memory (LAM).

A memory holds ``M = eta * sum_i k_i v_i^T`` and is read with ``r = M^T q``.
All updates are ordinary tensor operations, so when a tape is active the task
loss differentiates through the learning rule itself.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateKeyError, DimensionError, LabelError
from .tensor import Tensor


class LAMemory:
    """Key -> value associative store backed by a fast-weight matrix."""

    def __init__(self, d_key: int, d_val: int, eta: float | Tensor = 1.0):
        self.d_key = d_key
        self.d_val = d_val
        self.eta = eta
        self.reset()

    def reset(self) -> None:
        self.M = Tensor(np.zeros((self.d_key, self.d_val)))
        self.write_count = 0

    def _scaled(self, t: Tensor) -> Tensor:
        if isinstance(self.eta, Tensor):
            return T.mul(t, self.eta)
        return t if self.eta == 1.0 else T.scale(t, float(self.eta))

    def write(self, key: Tensor, value: Tensor) -> None:
        """Hebbian outer-product update ``M <- M + eta * key value^T``."""
        if key.shape != (self.d_key,) or value.shape != (self.d_val,):
            raise ContractError(
                f"write expects key ({self.d_key},) and value ({self.d_val},), "
                f"got {key.shape} and {value.shape}")
        self.M = T.add(self.M, self._scaled(T.outer(key, value)))
        self.write_count += 1

    def write_many(self, keys: Tensor, values: Tensor) -> None:
        """Store ``n`` pairs at once: ``M <- M + eta * K^T V``.

        Same result as ``n`` calls to :meth:`write`, up to summation order.
        """
        if (keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]
                or keys.shape[1] != self.d_key or values.shape[1] != self.d_val):
            raise ContractError(
                f"write_many expects n x {self.d_key} keys and n x {self.d_val} values, "
                f"got {keys.shape} and {values.shape}")
        if keys.shape[0] == 0:
            return
        self.M = T.add(self.M, self._scaled(T.matmul(T.transpose(keys), values)))
        self.write_count += keys.shape[0]

    def assign(self, M: Tensor, count: int) -> None:
        """Install fast weights produced by some other rule (e.g. a gradient map)."""
        if M.shape != (self.d_key, self.d_val):
            raise ContractError(f"assign expects {(self.d_key, self.d_val)}, got {M.shape}")
        self.M = M
        self.write_count = count

    def read(self, query: Tensor) -> Tensor:
        """``M^T q`` for one query vector, or ``Q M`` for a batch of row queries."""
        if query.shape[-1] != self.d_key or query.ndim not in (1, 2):
            raise ContractError(f"read expects queries of width {self.d_key}, got {query.shape}")
        if query.ndim == 1:
            return T.matmul(T.transpose(self.M), query)
        return T.matmul(query, self.M)


class LabelProjector:
    """Random projection of one-hot labels into pseudovalues.

    ``R`` has one row per class; entries are drawn from
    ``uniform(-1/sqrt(d_val), 1/sqrt(d_val))``.
    """

    def __init__(self, n_classes: int, d_val: int, rng, noise_halfwidth: float = 0.0,
                 trainable: bool = False):
        bound = 1.0 / np.sqrt(d_val)
        self.R = Tensor(rng.uniform(-bound, bound, size=(n_classes, d_val)),
                        requires_grad=trainable, name="R")
        self.noise_halfwidth = noise_halfwidth

    @property
    def n_classes(self) -> int:
        return self.R.shape[0]

    def project(self, labels, rng=None, noise: bool = True) -> Tensor:
        """Pseudovalues ``(onehot(y) + u) R`` for an array of labels.

        ``u ~ uniform(-w, w)`` is drawn from ``rng`` when ``noise`` is set and
        the half-width ``w`` is positive.
        """
        labels = np.atleast_1d(np.asarray(labels))
        c = self.n_classes
        if np.any(labels < 0) or np.any(labels >= c):
            raise IndexError(f"label {labels.tolist()} out of range for {c} classes")
        y = np.eye(c)[labels]
        w = self.noise_halfwidth
        if noise and w > 0:
            if rng is None:
                raise ContractError("noisy projection requires a random stream")
            y = y + rng.uniform(-w, w, size=y.shape)
        return T.matmul(Tensor(y), self.R)


def project_label(p: LabelProjector, label: int, C: int, rng=None, noise: bool = True) -> Tensor:
    """Pseudovalue for a single label as a ``d_val`` vector."""
    if C != p.n_classes:
        raise LabelError(f"projector has {p.n_classes} rows, asked for C={C}")
    if not 0 <= label < C:
        raise IndexError(f"label {label} out of range for {C} classes")
    return T.reshape(p.project([label], rng, noise), (p.R.shape[1],))


def crosstalk_report(mem_keys) -> np.ndarray:
    """Gram matrix of the L2-normalised keys.

    Off-diagonal magnitudes measure how far the stored keys are from the
    mutually orthogonal case in which reads are interference-free.
    """
    keys = [k.data if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
            for k in mem_keys]
    if not keys:
        raise ContractError("crosstalk_report needs at least one key")
    K = np.stack(keys)
    if K.ndim != 2:
        raise DimensionError(f"keys must be vectors of equal length, got {K.shape}")
    norms = np.linalg.norm(K, axis=1)
    if np.any(norms == 0):
        raise DegenerateKeyError(f"zero-norm key at index {int(np.argmin(norms))}")
    U = K / norms[:, None]
    return U @ U.T
