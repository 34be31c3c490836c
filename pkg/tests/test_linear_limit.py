import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from resnet_limits.errors import InvalidConfigError
from resnet_limits.linear_limit import (
    LinearLimitConfig,
    coupled_limit_hidden,
    coupled_limit_sample,
    limit_outputs,
    linear_limit_run,
    linear_m_matrix,
)
from resnet_limits.numerics import DistKind, SGrid, rng_create, sample_centered
from resnet_limits.resnet import HPConfig

from .conftest import X, Y_STAR

HP = HPConfig(eta_u=0.5, eta_v=0.4, sigma_u=0.9, sigma_v=1.1, sigma_in=1.2, sigma_out=0.8)


def run(a=1.0, K=4, hp=HP, n=100):
    return linear_limit_run(LinearLimitConfig(a, X, Y_STAR, K, hp=hp, grid=SGrid(n)))


@pytest.fixture(scope="module")
def state():
    return run(K=5)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        LinearLimitConfig(1.0, X, Y_STAR, 0)


def test_m1_closed_form(state):
    a = 1.0
    for s in (0, 37, 100):
        M1 = linear_m_matrix(state, s, 1)
        assert M1.shape == (1, 1)
        assert M1[0, 0] == pytest.approx(-(a**2) * (HP.eta_u * HP.sigma_v**2 + HP.eta_v * HP.sigma_u**2))


def test_m_matrix_vanishes():
    assert np.all(linear_m_matrix(run(a=0.0, K=3), 10, 2) == 0)
    assert np.all(linear_m_matrix(run(K=3, hp=HPConfig(eta_u=0.0, eta_v=0.0)), 10, 2) == 0)


def test_initial_block():
    st0 = run(K=1)
    assert st0.k == 0
    GH, GB = st0.nodes(st0.Gamma_H), st0.nodes(st0.Gamma_B)
    assert GH[0, 0, 0] == pytest.approx(HP.sigma_in**2 * X @ X)
    assert np.allclose(GH[:, 0, 0], HP.sigma_in**2 * X @ X)
    assert np.allclose(GB[:, 0, 0], HP.sigma_out**2 * Y_STAR @ Y_STAR)
    assert np.all(limit_outputs(st0)[0] == 0)


def test_zero_slope_freezes_everything():
    st0 = run(a=0.0, K=4)
    for arr in (st0.Gamma_H, st0.Gamma_B, st0.Lambda):
        assert np.allclose(arr, arr[:1], atol=1e-14)
    assert np.all(limit_outputs(st0) == 0)


def test_lambda_diagonal_consistency(state):
    assert max(state.lam_gap) < 1e-8
    lam = state.nodes(state.Lambda)
    for k in range(state.k + 1):
        assert np.allclose(lam[:, k, k], lam[0, k, k], atol=1e-10)


def test_covariances_are_symmetric_psd_and_finite(state):
    for G in (state.Gamma_H, state.Gamma_B):
        assert np.all(np.isfinite(G))
        assert np.allclose(G, np.swapaxes(G, 1, 2), atol=1e-12)
        assert np.min(np.linalg.eigvalsh(G)) > -1e-8


def test_grid_doubling_changes_outputs_little():
    a, b = run(n=100, K=5), run(n=200, K=5)
    assert np.max(np.abs(a.y[4] - b.y[4])) < 1e-6


def test_grid_convergence_order():
    ns = [5, 10, 20, 40]
    ref = run(n=640, K=5).y[-1]
    errs = [np.linalg.norm(run(n=n, K=5).y[-1] - ref) for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 3.5 <= slope <= 4.5


def test_runtime_k6():
    t = time.perf_counter()
    linear_limit_run(LinearLimitConfig(1.0, X, Y_STAR, 6, hp=HP))
    assert time.perf_counter() - t < 10


def test_loss_decreases_at_small_eta():
    st0 = run(K=6, hp=HPConfig(eta_u=0.1, eta_v=0.1))
    loss = 0.5 * np.sum((st0.y - Y_STAR) ** 2, axis=1)
    assert np.all(np.diff(loss) < 0)


def test_base_case_coupled_sample(state):
    gen = np.random.default_rng(0)
    w_in, w_out = gen.standard_normal(3), gen.standard_normal(3)
    H, B = coupled_limit_sample(state, w_in, w_out)
    assert np.allclose(H[:, 0], w_in @ X)
    assert np.allclose(B[:, 0], w_out @ (state.y[0] - Y_STAR))


@settings(max_examples=10)
@given(st.integers(0, 4), st.sampled_from([0, 50, 100]))
def test_sampled_rows_reproduce_covariance(k, s):
    state = run(K=5)
    n = 100_000
    rng = rng_create(k * 1000 + s, "rows")
    W_in = sample_centered(rng.child("in"), DistKind("gaussian", HP.sigma_in**2), (n, 3))
    W_out = sample_centered(rng.child("out"), DistKind("gaussian", HP.sigma_out**2), (n, 3))
    H = coupled_limit_hidden(state, W_in, W_out, s)[k]
    target = state.nodes(state.Gamma_H)[s, k, k]
    se = np.std(H**2) / np.sqrt(n)
    assert abs(np.mean(H**2) - target) < 4 * se
    assert stats.kstest(H, "norm", args=(0, np.sqrt(target))).pvalue > 0.001


def test_coupling_needs_positive_embedding_variance():
    st0 = run(K=2, hp=HPConfig(sigma_in=0.0, eta_u=0.1, eta_v=0.1))
    with pytest.raises(InvalidConfigError):
        coupled_limit_sample(st0, np.ones(3), np.ones(3), 0)


def test_state_serializes(state):
    blob = json.dumps(state.to_json())
    back = json.loads(blob)
    assert np.allclose(back["y"], state.y)
