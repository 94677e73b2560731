"""Few-step consistency sampling and latent-space conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import Condition
from .f0 import quantize_logf0, shift_f0
from .lcd import BoundaryScaling, consistency_fn
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class TimestepSequence:
    """Strictly decreasing re-noising steps, each in ``[1, T - 1]``; empty means one-step sampling."""

    taus: tuple[int, ...]

    def __post_init__(self):
        taus = tuple(int(x) for x in self.taus)
        object.__setattr__(self, "taus", taus)
        if any(a <= b for a, b in zip(taus, taus[1:])):
            raise ValueError(f"taus must be strictly decreasing: {taus}")

    def __len__(self) -> int:
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def validate(self, T: int) -> None:
        if any(not 1 <= x <= T - 1 for x in self.taus):
            raise ValueError(f"taus must lie in [1, {T - 1}]: {self.taus}")


def make_tau_sequence(N: int, T: int) -> TimestepSequence:
    """Uniformly spaced steps ``round(T (N - n) / N)`` for ``n = 1..N-1``."""
    if N < 1:
        raise ValueError("need at least one inference step")
    if N > T:
        raise ValueError(f"cannot take {N} steps on a {T}-step schedule")
    out: list[int] = []
    for n in range(1, N):
        tau = min(max(int(np.floor(T * (N - n) / N + 0.5)), 1), T - 1)
        if not out or tau < out[-1]:
            out.append(tau)
    return TimestepSequence(tuple(out))


def _f(m, z, t, c, s, scaling, omega):
    if not omega:
        return consistency_fn(m, z, t, c, s, scaling)
    cond = consistency_fn(m, z, t, c, s, scaling)
    return (1.0 + omega) * cond - omega * consistency_fn(m, z, t, c.as_null(), s, scaling)


def lcm_sample(
    m,
    c: Condition,
    taus: TimestepSequence,
    s: NoiseSchedule,
    seed: int,
    scaling: BoundaryScaling,
    omega: float | None = None,
    consistency=None,
) -> np.ndarray:
    """Multi-step consistency sampling, one output row per condition row.

    Jump from pure noise at ``T`` to a clean estimate, then for each ``tau``
    re-noise the estimate to ``tau`` and map it back. ``omega`` re-enables
    guidance at inference (off by default). ``consistency`` replaces the
    learned map, e.g. with an exact reference ``f(z, t, c)``.
    """
    taus.validate(s.T)
    fn = consistency or (lambda z, t, cc: _f(m, z, t, cc, s, scaling, omega))
    rng = np.random.default_rng(seed)
    dim = m.dim
    z = rng.standard_normal((len(c), dim))
    z0 = fn(z, s.T, c)
    for tau in taus:
        z_tau = s.alpha_hat[tau] * z0 + s.sigma_hat[tau] * rng.standard_normal(z0.shape)
        z0 = fn(z_tau, tau, c)
    return z0


def conversion_condition(content_src, f0_src, speaker_tar, tar_f0_mean) -> Condition:
    """Source content and pitch contour, shifted to the target's voiced mean, with the target speaker.

    ``tar_f0_mean`` is one value for all rows or one value per row.
    """
    content = np.atleast_2d(np.asarray(content_src, dtype=np.float64))
    contours = np.atleast_2d(np.asarray(f0_src, dtype=np.float64))
    if len(contours) != len(content):
        raise ValueError("need one F0 contour per content row")
    targets = np.broadcast_to(np.asarray(tar_f0_mean, dtype=np.float64), (len(content),))
    shifted = np.stack([shift_f0(row, m) for row, m in zip(contours, targets)])
    speaker = np.broadcast_to(np.asarray(speaker_tar, dtype=np.float64), (len(content), np.shape(speaker_tar)[-1]))
    return Condition(content, quantize_logf0(shifted), speaker, np.zeros(len(content), bool))


def convert(
    m,
    content_src,
    f0_src,
    speaker_tar,
    tar_f0_mean,
    taus: TimestepSequence,
    s: NoiseSchedule,
    seed: int,
    scaling: BoundaryScaling,
    omega: float | None = None,
) -> np.ndarray:
    """Sample latents for source content/pitch rendered with the target singer."""
    cond = conversion_condition(content_src, f0_src, speaker_tar, tar_f0_mean)
    return lcm_sample(m, cond, taus, s, seed, scaling, omega)
