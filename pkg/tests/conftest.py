import time

import numpy as np
import pytest

from lcdistill.denoiser import Condition, DenoiserModel, ModelConfig
from lcdistill.schedule import make_linear_schedule
from lcdistill.synthdata import DataSpec, build_distribution, sample_dataset

SMALL = ModelConfig(dim=3, content_dim=2, speaker_dim=2, f0_emb_dim=3, t_freqs=2, t_emb_dim=4, cond_width=5, width=7)


@pytest.fixture(scope="session")
def sched():
    return make_linear_schedule(100, 1e-4, 0.06)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_condition(cfg: ModelConfig, n: int, rng, frames: int = 3, null_frac: float = 0.0) -> Condition:
    return Condition(
        rng.standard_normal((n, cfg.content_dim)),
        rng.integers(0, 256, size=(n, frames)),
        rng.standard_normal((n, cfg.speaker_dim)),
        rng.random(n) < null_frac,
    )


def randomized_model(cfg: ModelConfig, T: int, seed: int, scale: float = 0.5) -> DenoiserModel:
    """A model with every tensor (zero-initialised ones included) set to random values."""
    m = DenoiserModel.init(cfg, T, seed=seed)
    r = np.random.default_rng(seed + 1)
    for p in m.params.values():
        p[...] = scale * r.standard_normal(p.shape)
    return m


@pytest.fixture(scope="session")
def gaussian_data():
    dist = build_distribution(DataSpec(dim=4))
    return dist, sample_dataset(dist, 512, 3)


class Criterion:
    """Records one acceptance criterion; an exception inside the block records a failure."""

    def __init__(self, num: int, label: str):
        self.num, self.label, self.parts, self.ok = num, label, [], True

    def check(self, ok: bool, detail: str) -> None:
        self.ok &= bool(ok)
        self.parts.append(("" if ok else "FAILED ") + detail)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None and exc_type is not AssertionError:
            self.check(False, f"{exc_type.__name__}: {exc}")
        self.parts.append(f"{time.perf_counter() - self.t0:.1f}s")
        ACCEPTANCE[self.num] = (self.ok and exc_type is None, self.label, "; ".join(self.parts))
        print(f"criterion {self.num} {'PASS' if ACCEPTANCE[self.num][0] else 'FAIL'}: {ACCEPTANCE[self.num][2]}")
        return False


# acceptance criteria outcomes, printed in the terminal summary: {number: (passed, label, detail)}
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in range(1, 11):
        if num in ACCEPTANCE:
            ok, label, detail = ACCEPTANCE[num]
            terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {label}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {num:2d} ----  not run")
