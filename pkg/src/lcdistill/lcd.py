"""Consistency function and latent consistency distillation with an EMA target."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ddim import guided_target
from .denoiser import Condition, DenoiserModel, DivergenceError, assert_finite, backward, eval_model
from .diffusion import forward_sample
from .optim import cosine_lr, update
from .schedule import NoiseSchedule
from .synthdata import LatentBatch


@dataclass(frozen=True)
class BoundaryScaling:
    """Skip/output weights in ``u = t/T``: ``c_skip(0) = 1`` and ``c_out(0) = 0``."""

    T: int
    sigma_data: float = 0.5
    s_c: float = 10.0

    def c_skip(self, t):
        x = self.s_c * np.asarray(t, dtype=np.float64) / self.T
        return self.sigma_data**2 / (x * x + self.sigma_data**2)

    def c_out(self, t):
        x = self.s_c * np.asarray(t, dtype=np.float64) / self.T
        return self.sigma_data * x / np.sqrt(x * x + self.sigma_data**2)


def _row_steps(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return np.full(n, int(t)) if t.ndim == 0 else t


def _consistency(m, z_t, t, c: Condition, s: NoiseSchedule, scaling: BoundaryScaling, need_cache=False):
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    t = _row_steps(t, len(z))
    s.check_step(t)
    cs = scaling.c_skip(t)[:, None]
    co = scaling.c_out(t)[:, None]
    a, sg = s.alpha_hat[t][:, None], s.sigma_hat[t][:, None]
    out = z.copy()
    live = t > 0
    cache = None
    if live.any():
        if c is not None and len(c) != len(z):
            c = c.repeat(len(z))
        zl, cl = z[live], (c if c is None or live.all() else c[live])
        if need_cache:
            eps, cache = eval_model(m, zl, t[live], cl)
        else:
            eps = m.predict(zl, t[live], cl)
        out[live] = cs[live] * zl + co[live] * (zl - sg[live] * eps) / a[live]
    # d out / d eps per row, only meaningful where t > 0
    deps = np.where(live[:, None], -co * sg / a, 0.0)
    return out, cache, live, deps


def consistency_fn(m, z_t, t, c: Condition, s: NoiseSchedule, scaling: BoundaryScaling) -> np.ndarray:
    """``c_skip(t) z_t + c_out(t) (z_t - sigma_hat eps) / alpha_hat``; rows with t = 0 pass through."""
    if np.ndim(t) != 0:
        return _consistency(m, z_t, t, c, s, scaling)[0]
    # one shared step (the sampling case): scalar weights, no row masks
    t = int(t)
    s.check_step(t)
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    if t == 0:
        return z.copy()
    if c is not None and len(c) != len(z):
        c = c.repeat(len(z))
    eps = m.predict(z, t, c)
    return float(scaling.c_skip(t)) * z + float(scaling.c_out(t)) * (z - s.sigma_hat[t] * eps) / s.alpha_hat[t]


Solver = Callable[..., np.ndarray]


@dataclass
class LcdTrainState:
    theta: DenoiserModel
    theta_minus: DenoiserModel
    teacher: object
    optimizer: object
    rng: np.random.Generator
    scaling: BoundaryScaling
    mu: float = 0.95
    omega: float = 0.3
    k: int = 10
    step: int = 0
    solver: Solver = field(default=guided_target, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("EMA rate mu must lie in [0, 1]")
        if self.theta.cfg != self.theta_minus.cfg:
            raise ValueError("student and EMA target must share a shape")
        if not 1 <= self.k <= self.theta.T - 1:
            raise ValueError(f"skipping interval k must lie in [1, {self.theta.T - 1}]")


def make_lcd_state(teacher, student: DenoiserModel, optimizer, seed: int, scaling: BoundaryScaling, **kw):
    """Student starts from ``student`` (a teacher copy, usually); the target starts equal to it."""
    theta = student.copy()
    return LcdTrainState(theta, theta.copy(), teacher, optimizer, np.random.default_rng(seed), scaling, **kw)


def consistency_distance(a, b) -> tuple[float, np.ndarray]:
    """Squared L2 distance averaged over rows and coordinates, plus its gradient w.r.t. ``a``."""
    diff = np.asarray(a) - np.asarray(b)
    # overflow surfaces as a non-finite loss, which callers treat as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def lcd_loss(state: LcdTrainState, z_tk, t, c: Condition, s: NoiseSchedule, k: int | None = None):
    """Consistency loss between the student at ``t + k`` and the EMA target at ``t``.

    The solver target and the EMA branch are constants; gradients are for ``theta`` only.
    """
    k = state.k if k is None else k
    z = np.atleast_2d(np.asarray(z_tk, dtype=np.float64))
    t = _row_steps(t, len(z))
    if np.any(t < 1) or np.any(t + k > s.T):
        raise IndexError(f"need 1 <= t <= T - k = {s.T - k}")
    z_hat = state.solver(state.teacher, z, t + k, t, c, state.omega, s)
    target = consistency_fn(state.theta_minus, z_hat, t, c, s, state.scaling)
    pred, cache, live, deps = _consistency(state.theta, z, t + k, c, s, state.scaling, need_cache=True)
    loss, dpred = consistency_distance(pred, target)
    if not np.isfinite(loss):
        raise DivergenceError(f"consistency loss is {loss}")
    grads = backward(state.theta, cache, (dpred * deps)[live])
    return loss, grads


def ema_update(state: LcdTrainState) -> LcdTrainState:
    mu = state.mu
    for name, p in state.theta_minus.params.items():
        p *= mu
        p += (1.0 - mu) * state.theta.params[name]
    state.theta_minus.version += 1
    return state


def distill_step(state: LcdTrainState, batch: LatentBatch, s: NoiseSchedule, lr: float | None = None):
    """One round of distillation on ``batch``; returns ``(state, loss)``.

    On a non-finite loss the state, including the random stream, is left as it was.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    snapshot = state.rng.bit_generator.state
    try:
        t = state.rng.integers(1, s.T - state.k + 1, size=len(batch))
        eps = state.rng.standard_normal(batch.z.shape)
        z_tk = forward_sample(batch.z, t + state.k, eps, s)
        loss, grads = lcd_loss(state, z_tk, t, batch.cond, s)
    except DivergenceError:
        state.rng.bit_generator.state = snapshot
        raise
    update(state.theta, grads, state.optimizer, lr)
    ema_update(state)
    assert_finite(state.theta)
    state.step += 1
    return state, loss


@dataclass
class GapProbe:
    """Fixed probe points for monitoring self-consistency along teacher trajectories."""

    z_tk: np.ndarray
    t: np.ndarray
    cond: Condition
    z_hat: np.ndarray

    @classmethod
    def build(cls, state: LcdTrainState, data: LatentBatch, s: NoiseSchedule, n: int = 512, seed: int = 12345):
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(data), size=n)
        batch = data.take(idx)
        t = rng.integers(1, s.T - state.k + 1, size=n)
        z_tk = forward_sample(batch.z, t + state.k, rng.standard_normal(batch.z.shape), s)
        z_hat = state.solver(state.teacher, z_tk, t + state.k, t, batch.cond, state.omega, s)
        return cls(z_tk, t, batch.cond, z_hat)

    def gap(self, state: LcdTrainState, s: NoiseSchedule, k: int) -> float:
        """Mean squared difference of the student's outputs at ``t + k`` and at the solver point ``t``."""
        a = consistency_fn(state.theta, self.z_tk, self.t + k, self.cond, s, state.scaling)
        b = consistency_fn(state.theta, self.z_hat, self.t, self.cond, s, state.scaling)
        return float(np.mean((a - b) ** 2))


def distill(
    state: LcdTrainState,
    data: LatentBatch,
    s: NoiseSchedule,
    iters: int,
    batch_size: int,
    lr_schedule: str = "constant",
    on_step: Callable[[int, float], None] | None = None,
) -> LcdTrainState:
    base_lr = state.optimizer.lr
    for i in range(iters):
        idx = state.rng.integers(0, len(data), size=batch_size)
        lr = cosine_lr(base_lr, i, iters) if lr_schedule == "cosine" else base_lr
        _, loss = distill_step(state, data.take(idx), s, lr)
        if on_step is not None:
            on_step(state.step, loss)
    return state
