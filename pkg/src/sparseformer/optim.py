"""Adam with a step-decay learning-rate schedule."""
from __future__ import annotations

import numpy as np

__all__ = ["Adam", "step_decay_lr"]


def step_decay_lr(iteration: int, base_lr: float, interval: int, factor: float = 0.2) -> float:
    """``base_lr * factor ** (iteration // interval)``."""
    if interval <= 0:
        return base_lr
    return base_lr * factor ** (iteration // interval)


class Adam:
    """Bias-corrected Adam over a dict of named arrays, updated in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter {params[name].shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state(self, t: int, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m, self.v = {}, {}
        for key, arr in tensors.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                self.m[name] = np.array(arr)
            elif kind == "adam.v":
                self.v[name] = np.array(arr)
