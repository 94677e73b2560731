"""F0 conditioning: voiced-mean pitch shift and log-F0 quantization.

A contour is a 1-D array of per-frame F0 in Hz where 0 marks an unvoiced frame.
"""

from __future__ import annotations

import numpy as np

N_BINS = 256
F0_MIN = 50.0
F0_MAX = 1100.0
UNVOICED_BIN = 0


class UnvoicedContourError(ValueError):
    pass


def as_contour(values) -> np.ndarray:
    c = np.asarray(values, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("F0 contour must be a non-empty 1-D array")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError("F0 values must be finite and >= 0")
    return c


def voiced_mean(contour) -> float:
    c = as_contour(contour)
    voiced = c[c > 0]
    if voiced.size == 0:
        raise UnvoicedContourError("contour has no voiced frames")
    return float(voiced.mean())


def shift_f0(src, tar_voiced_mean: float) -> np.ndarray:
    """Scale voiced frames so their mean becomes ``tar_voiced_mean``; zeros stay zero."""
    c = as_contour(src)
    if not tar_voiced_mean > 0:
        raise ValueError(f"target voiced mean must be positive, got {tar_voiced_mean}")
    ratio = tar_voiced_mean / voiced_mean(c)
    return np.where(c > 0, c * ratio, 0.0)


def quantize_logf0(contour, f_min: float = F0_MIN, f_max: float = F0_MAX) -> np.ndarray:
    """Map each frame to a bin in [0, 255]; bin 0 is reserved for unvoiced frames.

    Voiced frames are spread uniformly in log-Hz over bins 1..255, clamped at both ends.
    """
    c = np.asarray(contour, dtype=np.float64)
    bins = np.zeros(c.shape, dtype=np.int64)
    voiced = c > 0
    if np.any(voiced):
        pos = (np.log(c[voiced]) - np.log(f_min)) / (np.log(f_max) - np.log(f_min))
        raw = 1 + np.floor((N_BINS - 1) * pos)
        bins[voiced] = np.clip(raw, 1, N_BINS - 1).astype(np.int64)
    return bins


def read_contour(path) -> np.ndarray:
    """Read a single-column numeric text file."""
    return as_contour(np.loadtxt(path, dtype=np.float64, ndmin=1))


def write_contour(path, contour) -> None:
    c = as_contour(contour)
    with open(path, "w") as fh:
        for v in c:
            fh.write(f"{float(v)!r}\n")
