import numpy as np
import pytest

from conftest import SMALL, random_condition, randomized_model
from lcdistill.denoiser import DenoiserModel, DivergenceError
from lcdistill.diffusion import (
    TeacherTrainState,
    ancestral_sample,
    ancestral_step,
    eps_mse,
    forward_sample,
    teacher_loss_step,
    train_teacher,
)
from lcdistill.optim import SGD, make_optimizer
from lcdistill.synthdata import DataSpec, GaussianOracle, OracleDenoiser, build_distribution, sample_dataset


class ZeroModel:
    def __init__(self, dim, T):
        self.dim, self.T = dim, T

    def predict(self, z, t, c):
        return np.zeros_like(np.atleast_2d(z))


def test_forward_sample_examples(sched, rng):
    z0 = rng.standard_normal((3, 4))
    assert np.array_equal(forward_sample(z0, 0, rng.standard_normal(z0.shape), sched), z0)
    assert np.allclose(forward_sample(z0, 37, np.zeros_like(z0), sched), sched.alpha_hat[37] * z0)
    per_row = forward_sample(z0, np.array([1, 50, 100]), np.ones_like(z0), sched)
    assert np.allclose(per_row[1], sched.alpha_hat[50] * z0[1] + sched.sigma_hat[50])
    with pytest.raises(ValueError):
        forward_sample(z0, 3, np.zeros((3, 5)), sched)


def test_forward_sample_moments(sched):
    r = np.random.default_rng(5)
    z0 = np.array([1.5, -0.5])
    eps = r.standard_normal((40000, 2))
    zt = forward_sample(np.broadcast_to(z0, eps.shape), 60, eps, sched)
    assert np.allclose(zt.mean(axis=0), sched.alpha_hat[60] * z0, atol=5 * sched.sigma_hat[60] / 200)
    assert np.allclose(zt.var(axis=0), sched.sigma_hat[60] ** 2, rtol=0.03)


def test_eps_mse_arithmetic():
    loss, g = eps_mse(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert loss == 0.5
    assert np.allclose(g, [[-1.0, 0.0]])
    e = np.random.default_rng(0).standard_normal((4, 3))
    assert eps_mse(e, e)[0] == 0.0


def test_dropout_rate_and_t_range(sched, gaussian_data):
    dist, data = gaussian_data
    cfg = SMALL.__class__(dim=data.z.shape[1])
    state = TeacherTrainState(DenoiserModel.init(cfg, 100), SGD(0.0), np.random.default_rng(0), 0.1)
    seen_t = []
    while state.rows_seen < 20000:
        teacher_loss_step(state, data, sched)
        seen_t.append(state.last_t)
    seen_t = np.concatenate(seen_t)
    assert abs(state.rows_dropped / state.rows_seen - 0.1) < 0.01
    assert seen_t.min() == 1 and seen_t.max() == 100


def test_loss_nonnegative_and_divergence_leaves_state(sched, gaussian_data):
    dist, data = gaussian_data
    cfg = SMALL.__class__(dim=data.z.shape[1])
    m = randomized_model(cfg, 100, seed=2)
    state = TeacherTrainState(m, SGD(0.01), np.random.default_rng(1), 0.1)
    loss, _ = teacher_loss_step(state, data.take(np.arange(16)), sched)
    assert loss >= 0
    m.params["out.b"][0] = np.nan
    seen = state.rows_seen
    with pytest.raises(DivergenceError):
        teacher_loss_step(state, data.take(np.arange(16)), sched)
    assert state.rows_seen == seen and state.step == 0


def test_training_is_deterministic(sched, gaussian_data):
    dist, data = gaussian_data
    cfg = SMALL.__class__(dim=data.z.shape[1], width=16)

    def run():
        st = TeacherTrainState(DenoiserModel.init(cfg, 100, seed=1), make_optimizer("adam", 1e-3), np.random.default_rng(4))
        losses = []
        train_teacher(st, data, sched, 30, 32, on_step=lambda i, l: losses.append(l))
        return st.model.param_hash(), losses

    assert run() == run()


def test_weight_averaging(sched, gaussian_data):
    dist, data = gaussian_data
    cfg = SMALL.__class__(dim=data.z.shape[1], width=16)
    st = TeacherTrainState(DenoiserModel.init(cfg, 100, seed=1), SGD(1e-2), np.random.default_rng(4), ema_rate=0.5)
    start = st.model.copy()
    train_teacher(st, data, sched, 1, 32)
    for name, p in st.ema.params.items():
        assert np.allclose(p, 0.5 * start.params[name] + 0.5 * st.model.params[name])
    assert st.weights is st.ema
    assert TeacherTrainState(start, SGD(0.1), np.random.default_rng(0)).weights is start


def test_ancestral_step_formula_collapse(sched, rng):
    m = ZeroModel(3, 100)
    z = rng.standard_normal((2, 3))
    assert np.allclose(ancestral_step(m, z, 40, None, sched, np.zeros_like(z)), z / np.sqrt(sched.alpha[40]))
    # noise is ignored at the last step
    assert np.allclose(ancestral_step(m, z, 1, None, sched, 100 * np.ones_like(z)), z / np.sqrt(sched.alpha[1]))
    with pytest.raises(IndexError):
        ancestral_step(m, z, 0, None, sched, None)


def test_zero_chain_prefix_products(sched, rng):
    m = ZeroModel(2, 100)
    z = rng.standard_normal((1, 2))
    cur = z
    for t in range(100, 80, -1):
        cur = ancestral_step(m, cur, t, None, sched, np.zeros_like(z))
        expected = z * np.prod(1.0 / np.sqrt(sched.alpha[t:101]))
        assert np.allclose(cur, expected, rtol=1e-13)


def test_ancestral_sample_is_deterministic(sched, rng):
    m = randomized_model(SMALL, 100, seed=6, scale=0.1)
    c = random_condition(SMALL, 3, rng)
    assert np.array_equal(ancestral_sample(m, c, sched, 5), ancestral_sample(m, c, sched, 5))
    assert not np.array_equal(ancestral_sample(m, c, sched, 5), ancestral_sample(m, c, sched, 6))


@pytest.mark.parametrize("mean,var", [(0.0, 1.0), (1.0, 0.5)])
def test_oracle_ancestral_chain_matches_target(sched, mean, var):
    o = GaussianOracle(np.full(4, mean), np.full(4, var))
    dist = build_distribution(DataSpec(dim=4))
    cond = sample_dataset(dist, 4000, 0).cond
    z = ancestral_sample(OracleDenoiser(o, sched), cond, sched, seed=1)
    assert np.all(np.abs(z.mean(axis=0) - mean) < 0.05 * max(1.0, abs(mean)))
    assert np.all(np.abs(z.var(axis=0) / var - 1) < 0.05)
