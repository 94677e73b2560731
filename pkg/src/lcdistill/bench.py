"""Per-sample latency of the teacher chain versus few-step consistency sampling."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import re
import time
from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import Condition
from .diffusion import ancestral_sample
from .lcd import BoundaryScaling
from .lcm import lcm_sample, make_tau_sequence
from .schedule import NoiseSchedule

BENCH_FIELDS = ("method", "steps", "wall_ns_median", "wall_ns_p10", "wall_ns_p90", "dim", "batch", "trials")


class CallCounter:
    """Wraps a noise predictor and counts how many times it is evaluated."""

    def __init__(self, model):
        self.model = model
        self.calls = 0

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def T(self) -> int:
        return self.model.T

    def predict(self, z_t, t, c):
        self.calls += 1
        return self.model.predict(z_t, t, c)


@dataclass(frozen=True)
class BenchRecord:
    method: str
    steps: int
    wall_ns_median: int
    wall_ns_p10: int
    wall_ns_p90: int
    dim: int
    batch: int
    trials: int
    output_hash: str = ""

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k in BENCH_FIELDS}


def parse_method(method: str) -> tuple[str, int]:
    m = re.fullmatch(r"(teacher|lcm)-(\d+)", method.strip())
    if not m:
        raise ValueError(f"unknown sampler {method!r}; expected teacher-T or lcm-N")
    return m.group(1), int(m.group(2))


def run_sampler(model, method: str, cond: Condition, s: NoiseSchedule, scaling: BoundaryScaling, seed: int):
    kind, n = parse_method(method)
    if model.T != s.T:
        raise ValueError(f"model was built for T={model.T}, schedule has T={s.T}")
    if kind == "teacher":
        if n != s.T:
            raise ValueError(f"teacher sampling runs all {s.T} steps, got {method!r}")
        return ancestral_sample(model, cond, s, seed)
    return lcm_sample(model, cond, make_tau_sequence(n, s.T), s, seed, scaling)


def output_digest(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype="<f8").tobytes()).hexdigest()


def pin_to_one_cpu() -> None:
    if hasattr(os, "sched_setaffinity"):
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[0]})


def bench_sampler(
    model,
    method: str,
    cond: Condition,
    s: NoiseSchedule,
    scaling: BoundaryScaling,
    trials: int = 7,
    warmups: int = 2,
    seed: int = 0,
) -> BenchRecord:
    """Median per-sample wall time over ``trials`` runs after ``warmups`` discarded runs.

    Every run uses the same seed; differing outputs across runs raise.
    """
    if trials < 5:
        raise ValueError("need at least 5 timed trials")
    counter = CallCounter(model)
    n = len(cond)
    digest = None
    times = []
    for i in range(warmups + trials):
        counter.calls = 0
        t0 = time.perf_counter_ns()
        z = run_sampler(counter, method, cond, s, scaling, seed)
        dt = time.perf_counter_ns() - t0
        d = output_digest(z)
        if digest is None:
            digest = d
        elif d != digest:
            raise RuntimeError(f"{method}: sampled values changed between benchmark runs")
        if i >= warmups:
            times.append(dt / n)
    p10, p50, p90 = np.percentile(times, [10, 50, 90])
    return BenchRecord(method, counter.calls, int(p50), int(p10), int(p90), model.dim, n, trials, digest)


def bench_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()
