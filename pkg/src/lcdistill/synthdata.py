"""Synthetic conditioned latents and closed-form Gaussian oracles.

Random streams use NumPy's PCG64 bit generator (``numpy.random.default_rng``)
seeded with integer seeds or ``[seed, stream]`` pairs, so a dataset is fully
determined by its distribution description and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Condition
from .f0 import quantize_logf0
from .schedule import NoiseSchedule

UNVOICED_PROB = 0.15
F0_JITTER = 0.03


@dataclass(frozen=True, eq=False)
class GaussianOracle:
    """Diagonal Gaussian data distribution N(mean, diag(var))."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), mean.shape).copy()
        if np.any(var <= 0):
            raise ValueError("oracle variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def posterior_mean(self, z_t, t: int, s: NoiseSchedule) -> np.ndarray:
        """E[z_0 | z_t] under this prior."""
        a, sg = s.alpha_hat[t], s.sigma_hat[t]
        z = np.asarray(z_t, dtype=np.float64)
        return (a * self.var * z + sg**2 * self.mean) / (a**2 * self.var + sg**2)

    def marginal(self, t: int, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
        a, sg = s.alpha_hat[t], s.sigma_hat[t]
        return a * self.mean, a**2 * self.var + sg**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))


def oracle_eps(o: GaussianOracle, z_t, t: int, s: NoiseSchedule) -> np.ndarray:
    """Optimal noise prediction E[eps | z_t]; zero at t = 0."""
    z = np.asarray(z_t, dtype=np.float64)
    if t == 0:
        return np.zeros_like(z)
    s.check_step(t, lo=1)
    return (z - s.alpha_hat[t] * o.posterior_mean(z, t, s)) / s.sigma_hat[t]


def _flow_rhs(o: GaussianOracle, xbar, rho):
    # d xbar / d rho = eps*, written in xbar = z / alpha_hat coordinates.
    return rho * (xbar - o.mean) / (o.var + rho * rho)


def _rk4(o: GaussianOracle, xbar, rho0: float, rho1: float, n: int):
    h = (rho1 - rho0) / n
    x = xbar.copy()
    for i in range(n):
        r = rho0 + i * h
        k1 = _flow_rhs(o, x, r)
        k2 = _flow_rhs(o, x + 0.5 * h * k1, r + 0.5 * h)
        k3 = _flow_rhs(o, x + 0.5 * h * k2, r + 0.5 * h)
        k4 = _flow_rhs(o, x + h * k3, r + h)
        x += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def oracle_flow(
    o: GaussianOracle,
    z_t,
    t: int,
    s_target: int,
    sched: NoiseSchedule,
    substeps: int = 10_000,
    rtol: float = 1e-11,
) -> np.ndarray:
    """Carry ``z_t`` from step ``t`` to ``s_target`` along the probability-flow ODE.

    The ODE is integrated with RK4 in the noise-to-signal ratio, starting at
    ``substeps`` and halving the step until two successive resolutions agree.
    ``s_target == t`` is the identity.
    """
    if s_target > t:
        raise ValueError(f"flow target {s_target} must not exceed source step {t}")
    sched.check_step([t, s_target])
    z = np.asarray(z_t, dtype=np.float64)
    if s_target == t:
        return z.copy()
    rho = sched.rho
    xbar = z / sched.alpha_hat[t]
    coarse = _rk4(o, xbar, rho[t], rho[s_target], substeps)
    for _ in range(6):
        substeps *= 2
        fine = _rk4(o, xbar, rho[t], rho[s_target], substeps)
        if np.max(np.abs(fine - coarse)) <= rtol * max(1.0, np.max(np.abs(fine))):
            break
        coarse = fine
    else:
        raise RuntimeError("probability-flow integration did not converge")
    return sched.alpha_hat[s_target] * fine


@dataclass(eq=False)
class Component:
    oracle: GaussianOracle
    speaker: np.ndarray
    f0_hz: float


@dataclass(eq=False)
class LatentDistribution:
    """Gaussian or Gaussian mixture where each component is one synthetic singer."""

    components: list[Component]
    weights: np.ndarray
    content_dim: int
    f0_frames: int

    def __post_init__(self):
        if not self.components:
            raise ValueError("distribution needs at least one component")
        dims = {c.oracle.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("components disagree on dimension")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.components),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative, one per component")
        self.weights = w / w.sum()

    @property
    def dim(self) -> int:
        return self.components[0].oracle.dim

    @property
    def speaker_dim(self) -> int:
        return len(self.components[0].speaker)

    def mean(self) -> np.ndarray:
        return sum(w * c.oracle.mean for w, c in zip(self.weights, self.components))

    def cov(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, c in zip(self.weights, self.components):
            d = c.oracle.mean - mu
            out += w * (np.diag(c.oracle.var) + np.outer(d, d))
        return out

    def contours(self, labels, rng: np.random.Generator) -> np.ndarray:
        """Per-row F0 contours in Hz around each row's component pitch."""
        labels = np.asarray(labels)
        base = np.array([self.components[k].f0_hz for k in labels])
        f0 = base[:, None] * np.exp(F0_JITTER * rng.standard_normal((len(labels), self.f0_frames)))
        unvoiced = rng.random((len(labels), self.f0_frames)) < UNVOICED_PROB
        unvoiced[unvoiced.all(axis=1), 0] = False
        return np.where(unvoiced, 0.0, f0)

    def condition(self, content, contours, speaker_labels) -> Condition:
        speakers = np.stack([self.components[k].speaker for k in np.asarray(speaker_labels)])
        bins = quantize_logf0(contours)
        return Condition(content, bins, speakers, np.zeros(len(speakers), bool))


@dataclass(eq=False)
class LatentBatch:
    z: np.ndarray
    cond: Condition
    labels: np.ndarray
    f0: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        if self.z.shape[0] < 1 or self.z.shape[1] < 1:
            raise ValueError("latent batch must have at least one row and one column")
        if len(self.cond) != len(self.z):
            raise ValueError("one condition per latent row is required")

    def __len__(self) -> int:
        return len(self.z)

    def take(self, idx) -> "LatentBatch":
        return LatentBatch(self.z[idx], self.cond[idx], self.labels[idx], self.f0[idx])


@dataclass(frozen=True)
class DataSpec:
    distribution: str = "gaussian"
    dim: int = 8
    n: int = 4096
    seed: int = 0
    components: int = 2
    separation: float = 3.0
    mean: tuple[float, ...] = (0.0,)
    var: tuple[float, ...] = (1.0,)
    content_dim: int = 4
    speaker_dim: int = 4
    f0_frames: int = 8


def build_distribution(spec: DataSpec) -> LatentDistribution:
    """Fix component parameters and singer identities from ``spec.seed``."""
    if spec.dim < 1:
        raise ValueError("data.dim must be >= 1")
    rng = np.random.default_rng([spec.seed, 0])
    var = np.broadcast_to(np.asarray(spec.var, dtype=np.float64), (spec.dim,))
    if spec.distribution == "gaussian":
        means = [np.broadcast_to(np.asarray(spec.mean, dtype=np.float64), (spec.dim,))]
    elif spec.distribution == "mixture":
        k = spec.components
        if k < 2:
            raise ValueError("a mixture needs at least two components")
        offsets = np.linspace(-1.0, 1.0, k) * spec.separation
        means = [np.full(spec.dim, off) for off in offsets]
    else:
        raise ValueError(f"unknown distribution {spec.distribution!r}")
    comps = []
    for i, mu in enumerate(means):
        speaker = rng.standard_normal(spec.speaker_dim)
        comps.append(Component(GaussianOracle(mu, var), speaker, 180.0 * 1.5**i))
    return LatentDistribution(comps, np.ones(len(comps)), spec.content_dim, spec.f0_frames)


def sample_dataset(dist: LatentDistribution, n: int, seed: int) -> LatentBatch:
    """Draw ``n`` labelled latents with their conditions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(len(dist.components), size=n, p=dist.weights)
    z = np.empty((n, dist.dim))
    for k, comp in enumerate(dist.components):
        rows = labels == k
        z[rows] = comp.oracle.sample(int(rows.sum()), rng)
    content = rng.standard_normal((n, dist.content_dim))
    contours = dist.contours(labels, rng)
    return LatentBatch(z, dist.condition(content, contours, labels), labels, contours)


class OracleDenoiser:
    """Exact noise predictor for a single Gaussian; conditions are ignored."""

    def __init__(self, oracle: GaussianOracle, sched: NoiseSchedule):
        self.oracle = oracle
        self.sched = sched
        self.T = sched.T

    @property
    def dim(self) -> int:
        return self.oracle.dim

    def predict(self, z_t, t, c=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (len(z),))
        out = np.empty_like(z)
        for step in np.unique(t):
            rows = t == step
            out[rows] = oracle_eps(self.oracle, z[rows], int(step), self.sched)
        return out
