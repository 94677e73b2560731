"""Latent-space distributional metrics used by eval and the acceptance checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MomentReport:
    mean_err: float  # ||mean_hat - mean||_2
    cov_gap: float  # ||cov_hat - cov||_F
    rel_mean_err: float  # mean_err / sqrt(trace(cov))
    rel_cov_gap: float  # cov_gap / ||cov||_F
    max_rel_var_err: float  # max_i |var_hat_i - var_i| / var_i

    @property
    def total(self) -> float:
        """Scalar distributional error: mean error plus covariance gap."""
        return self.mean_err + self.cov_gap


def moment_errors(samples, mean, cov) -> MomentReport:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 1:
        cov = np.diag(cov)
    if x.shape[1] != len(mean) or cov.shape != (len(mean), len(mean)):
        raise ValueError("sample dimension does not match the reference")
    m_hat = x.mean(axis=0)
    c_hat = np.cov(x, rowvar=False).reshape(cov.shape)
    mean_err = float(np.linalg.norm(m_hat - mean))
    cov_gap = float(np.linalg.norm(c_hat - cov))
    var = np.diag(cov)
    return MomentReport(
        mean_err,
        cov_gap,
        mean_err / math.sqrt(float(np.trace(cov))),
        cov_gap / float(np.linalg.norm(cov)),
        float(np.max(np.abs(np.diag(c_hat) - var) / var)),
    )


def nearest_component(samples, means) -> np.ndarray:
    x = np.atleast_2d(samples)
    d = ((x[:, None, :] - np.asarray(means)[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def assignment_accuracy(samples, means, labels) -> float:
    """Fraction of samples whose nearest component mean is their intended component."""
    labels = np.broadcast_to(np.asarray(labels), (len(np.atleast_2d(samples)),))
    return float(np.mean(nearest_component(samples, means) == labels))


def _two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def two_sample_moment_test(x, y) -> float:
    """Bonferroni-corrected p-value for equal per-coordinate means and variances.

    Means use Welch z-scores; variances use the normal approximation of the
    log variance ratio, whose standard error is ``sqrt(2/(n-1) + 2/(m-1))``.
    """
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    n, m = len(x), len(y)
    vx, vy = x.var(axis=0, ddof=1), y.var(axis=0, ddof=1)
    z_mean = (x.mean(axis=0) - y.mean(axis=0)) / np.sqrt(vx / n + vy / m)
    z_var = np.log(vx / vy) / math.sqrt(2.0 / (n - 1) + 2.0 / (m - 1))
    zs = np.concatenate([z_mean, z_var])
    p = min(_two_sided_p(float(z)) for z in zs)
    return min(1.0, p * len(zs))
