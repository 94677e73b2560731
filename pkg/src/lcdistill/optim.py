"""Gradient-descent updates for :class:`DenoiserModel` parameters."""

from __future__ import annotations

import math

import numpy as np

from .denoiser import DenoiserModel, DivergenceError


class SGD:
    """Plain descent ``theta <- theta - lr * grad``."""

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def direction(self, name: str, g: np.ndarray) -> np.ndarray:
        return g


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def direction(self, name: str, g: np.ndarray) -> np.ndarray:
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
        v = self.v[name]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** self.t)
        vhat = v / (1 - self.b2 ** self.t)
        return mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def cosine_lr(base: float, step: int, total: int, floor: float = 0.02) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def update(m: DenoiserModel, grads: dict[str, np.ndarray], opt, lr: float | None = None) -> DenoiserModel:
    """Apply one optimizer step in place and bump the model version.

    Non-finite gradients abort before any parameter is touched.
    """
    for name, g in grads.items():
        if name not in m.params or g.shape != m.params[name].shape:
            raise ValueError(f"gradient {name} does not match model parameters")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
    lr = opt.lr if lr is None else lr
    opt.t += 1
    for name in sorted(grads):
        m.params[name] -= lr * opt.direction(name, grads[name])
    m.version += 1
    return m
