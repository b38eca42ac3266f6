"""Parameter update rules over name->array dicts."""

from __future__ import annotations

from typing import Mapping

import numpy as np


def sgd(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {k: params[k] - lr * grads[k] for k in params}


class Adam:
    """Adam with the WGAN-GP betas ``(0.5, 0.9)`` by default."""

    def __init__(self, lr: float, betas: tuple[float, float] = (0.5, 0.9), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


class Optimizer:
    """Plain SGD, or Adam when ``kind == "adam"``; one instance per parameter set."""

    def __init__(self, kind: str, lr: float):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self._adam = Adam(lr) if kind == "adam" else None

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        if self._adam is not None:
            self._adam.lr = lr

    def step(self, params, grads):
        if self._adam is None:
            return sgd(params, grads, self.lr)
        return self._adam.step(params, grads)
