"""Deterministic DDIM jumps and the guided distillation target."""

from __future__ import annotations

import numpy as np

from .denoiser import Condition
from .schedule import NoiseSchedule


def _steps(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    return np.full(n, int(t)) if t.ndim == 0 else t


def ddim_from_eps(z_from, eps_hat, t_from, t_to, s: NoiseSchedule) -> np.ndarray:
    """DDIM update given a noise estimate: predict ``z_0`` then re-noise to ``t_to``."""
    z = np.atleast_2d(z_from)
    tf, tt = _steps(t_from, len(z)), _steps(t_to, len(z))
    a_f, s_f = s.alpha_hat[tf][:, None], s.sigma_hat[tf][:, None]
    a_t, s_t = s.alpha_hat[tt][:, None], s.sigma_hat[tt][:, None]
    z0_hat = (z - s_f * eps_hat) / a_f
    return a_t * z0_hat + s_t * eps_hat


def ddim_step(m, z_from, t_from, t_to, c: Condition, s: NoiseSchedule, allow_identity: bool = False):
    """Deterministic jump from ``t_from`` to an earlier ``t_to`` (both scalar or one per row)."""
    z = np.atleast_2d(np.asarray(z_from, dtype=np.float64))
    tf, tt = _steps(t_from, len(z)), _steps(t_to, len(z))
    s.check_step(tf, lo=1)
    s.check_step(tt)
    if allow_identity and np.all(tf == tt):
        return z.copy()
    if np.any(tt >= tf):
        raise ValueError("ddim_step needs t_to < t_from")
    return ddim_from_eps(z, m.predict(z, tf, c), tf, tt, s)


def guided_target(m, z_from, t_from, t_to, c: Condition, omega: float, s: NoiseSchedule) -> np.ndarray:
    """``(1 + omega) * Psi(z, c) - omega * Psi(z, null)``, combined after the solver step."""
    if np.any(c.is_null):
        raise ValueError("guided_target needs a concrete (non-null) condition")
    cond = ddim_step(m, z_from, t_from, t_to, c, s)
    if omega == 0:
        return cond
    uncond = ddim_step(m, z_from, t_from, t_to, c.as_null(), s)
    return (1.0 + omega) * cond - omega * uncond


def ddim_chain(m, z_T, t_start: int, k: int, c: Condition, s: NoiseSchedule) -> np.ndarray:
    """Chain DDIM jumps of size ``k`` from ``t_start`` down to 0 (last jump may be shorter)."""
    z = np.atleast_2d(np.asarray(z_T, dtype=np.float64))
    t = t_start
    while t > 0:
        nxt = max(t - k, 0)
        z = ddim_step(m, z, t, nxt, c, s)
        t = nxt
    return z
