"""Teacher diffusion model: forward noising, noise-space MSE training, ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import Condition, DenoiserModel, DivergenceError, backward, eval_model
from .optim import cosine_lr, update
from .schedule import NoiseSchedule
from .synthdata import LatentBatch


def forward_sample(z0, t, eps, s: NoiseSchedule) -> np.ndarray:
    """``alpha_hat[t] * z0 + sigma_hat[t] * eps`` with ``t`` scalar or one per row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    t = np.asarray(t)
    s.check_step(t)
    a, sg = s.alpha_hat[t], s.sigma_hat[t]
    if t.ndim == 1:
        a, sg = a[:, None], sg[:, None]
    return a * z0 + sg * eps


def eps_mse(eps, eps_hat) -> tuple[float, np.ndarray]:
    """Mean over rows and coordinates of the squared error, and its gradient w.r.t. ``eps_hat``."""
    diff = np.asarray(eps_hat) - np.asarray(eps)
    # overflow surfaces as a non-finite loss, which callers treat as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class TeacherTrainState:
    model: DenoiserModel
    optimizer: object
    rng: np.random.Generator
    p_uncond: float = 0.1
    ema_rate: float = 0.0
    ema: DenoiserModel | None = field(default=None, repr=False)
    step: int = 0
    rows_seen: int = 0
    rows_dropped: int = 0
    last_t: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ValueError("ema_rate must lie in [0, 1)")
        if self.ema_rate > 0 and self.ema is None:
            self.ema = self.model.copy()

    @property
    def weights(self) -> DenoiserModel:
        """The averaged weights when averaging is on, else the raw model."""
        return self.ema if self.ema_rate > 0 else self.model


def teacher_loss_step(state: TeacherTrainState, batch: LatentBatch, s: NoiseSchedule):
    """Draw ``t``, noise and condition dropout for each row; return ``(loss, grads)``.

    Raises :class:`DivergenceError` on a non-finite loss without touching the
    step counter or the dropout statistics.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    rng = state.rng
    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal(batch.z.shape)
    drop = rng.random(n) < state.p_uncond
    z_t = forward_sample(batch.z, t, eps, s)
    eps_hat, cache = eval_model(state.model, z_t, t, batch.cond.as_null(drop))
    loss, dloss = eps_mse(eps, eps_hat)
    if not np.isfinite(loss):
        raise DivergenceError(f"teacher loss is {loss} at step {state.step}")
    state.rows_seen += n
    state.rows_dropped += int(drop.sum())
    state.last_t = t
    return loss, backward(state.model, cache, dloss)


def train_teacher(
    state: TeacherTrainState,
    data: LatentBatch,
    s: NoiseSchedule,
    iters: int,
    batch_size: int,
    lr_schedule: str = "constant",
    on_step: Callable[[int, float], None] | None = None,
) -> TeacherTrainState:
    base_lr = state.optimizer.lr
    for i in range(iters):
        idx = state.rng.integers(0, len(data), size=batch_size)
        loss, grads = teacher_loss_step(state, data.take(idx), s)
        lr = cosine_lr(base_lr, i, iters) if lr_schedule == "cosine" else base_lr
        update(state.model, grads, state.optimizer, lr)
        if state.ema_rate > 0:
            r = state.ema_rate
            for name, p in state.ema.params.items():
                p *= r
                p += (1.0 - r) * state.model.params[name]
            state.ema.version += 1
        state.step += 1
        if on_step is not None:
            on_step(state.step, loss)
    return state


def ancestral_step(m, z_t, t: int, c: Condition, s: NoiseSchedule, noise) -> np.ndarray:
    """One reverse step ``z_t -> z_{t-1}`` with variance ``beta_t`` (none at ``t = 1``)."""
    if not 1 <= t <= s.T:
        raise IndexError(f"ancestral step needs 1 <= t <= {s.T}, got {t}")
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    eps_hat = m.predict(z, t, c)
    mean = (z - (s.beta[t] / s.sigma_hat[t]) * eps_hat) / np.sqrt(s.alpha[t])
    if t == 1:
        return mean
    return mean + np.sqrt(s.beta[t]) * np.asarray(noise, dtype=np.float64)


def ancestral_sample(m, c: Condition, s: NoiseSchedule, seed: int) -> np.ndarray:
    """Run the full ``T``-step chain from ``z_T ~ N(0, I)``, one row per condition row."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((len(c), m.dim))
    for t in range(s.T, 0, -1):
        noise = rng.standard_normal(z.shape) if t > 1 else None
        z = ancestral_step(m, z, t, c, s, noise)
    return z
