"""Adam over a named set of slow parameters."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], alpha: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.alpha, self.beta1, self.beta2, self.epsilon = alpha, beta1, beta2, epsilon
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """One bias-corrected Adam update; a missing grad counts as zero."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.alpha * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2)
                                                                + self.epsilon)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "alpha": self.alpha, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, s: dict) -> None:
        if set(s["m"]) != set(self.params):
            raise ValueError("optimizer state does not match the parameter set")
        self.step_count = int(s["step"])
        self.alpha, self.beta1 = float(s["alpha"]), float(s["beta1"])
        self.beta2, self.epsilon = float(s["beta2"]), float(s["epsilon"])
        self.m = {k: np.array(s["m"][k], dtype=np.float64) for k in self.params}
        self.v = {k: np.array(s["v"][k], dtype=np.float64) for k in self.params}
