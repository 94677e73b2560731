"""Discrete variance-preserving noise schedule.

All arrays are indexed directly by the step ``t`` in ``0..T``; index 0 is the
clean-data boundary (``alpha_bar[0] = 1``, ``beta[0] = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class ConfigError(ValueError):
    """Invalid experiment or construction parameters."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_hat: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.alpha_hat, self.sigma_hat):
            arr.setflags(write=False)

    def check_step(self, t, lo: int = 0) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < lo or t.max() > self.T):
            raise IndexError(f"step out of range [{lo}, {self.T}]: {t.min()}..{t.max()}")

    @property
    def rho(self) -> np.ndarray:
        """Noise-to-signal ratio sigma_hat / alpha_hat, the DDIM integration variable."""
        return self.sigma_hat / self.alpha_hat


def make_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    beta = np.zeros(T + 1)
    # each beta is the correctly rounded value of the exact rational grid between the endpoints
    lo, step = Fraction(beta_min), (Fraction(beta_max) - Fraction(beta_min)) / max(T - 1, 1)
    beta[1:] = [float(lo + step * i) for i in range(T)]
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1)
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    alpha_hat = np.sqrt(alpha_bar)
    sigma_hat = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T, beta, alpha, alpha_bar, alpha_hat, sigma_hat)


def coeffs_at(s: NoiseSchedule, t: int) -> tuple[float, float, float, float]:
    """Return ``(alpha_hat, sigma_hat, alpha, beta)`` at step ``t``.

    At ``t = 0`` this is ``(1, 0, 1, 0)``; the last two entries carry no meaning there.
    """
    if not 0 <= t <= s.T:
        raise IndexError(f"step {t} outside [0, {s.T}]")
    return float(s.alpha_hat[t]), float(s.sigma_hat[t]), float(s.alpha[t]), float(s.beta[t])
