import numpy as np
import pytest
from hypothesis import given, strategies as st

from resnet_limits import activations
from resnet_limits.bench import (
    COUPLED,
    UNCOUPLED,
    CltGap,
    CltProbe,
    ErrorRecord,
    LimitTrajectory,
    RateFit,
    SweepConfig,
    Target,
    clt_empirical_gap,
    delta_h,
    delta_y,
    embedding_key,
    emit_csv,
    fit_rate,
    histogram_ks,
    loglog_slope,
    powerlaw_slope,
    read_clt_csv,
    read_errors_csv,
    read_fits_csv,
    run_sweep,
    seed_average,
)
from resnet_limits.errors import ContractViolationError, InvalidConfigError, InvalidInputError, UnderdeterminedFitError
from resnet_limits.numerics import rng_create
from resnet_limits.resnet import HPConfig, ShapeConfig, TrainRecord

HP = HPConfig(eta_u=0.05, eta_v=0.05)


def record(hidden, outputs=None, coupling=COUPLED, D=4):
    W_in = np.arange(3 * D, dtype=float).reshape(D, 3)
    W_out = -W_in
    outputs = np.zeros((2, 1, 3)) if outputs is None else outputs
    return TrainRecord(ShapeConfig(2, 2, D), hidden, outputs, np.zeros(2), W_in, W_out, {"coupling": coupling})


def limit_of(rec, hidden, coupled=True):
    return LimitTrajectory(hidden, rec.outputs[:, 0], coupled, embedding_key(rec.W_in, rec.W_out))


def planted(alpha=0.67, beta=0.44, noise=0.0, gen=None):
    shapes = [(L, M, D) for L in (8, 64) for M in (8, 64, 512) for D in (8, 32, 128)]
    recs = []
    for L, M, D in shapes:
        err = np.hypot(alpha * np.sqrt(D / (M * L)), beta / np.sqrt(D))
        if noise:
            err *= 1 + noise * gen.standard_normal()
        recs.append(ErrorRecord("r", L, M, D, ShapeConfig(L, M, D).n_params, 0, 5, err, err))
    return recs


# ---------------------------------------------------------------- errors


def test_delta_trivial_cases():
    gen = np.random.default_rng(0)
    H = {2: gen.standard_normal((2, 1, 4))}
    rec = record(H)
    assert delta_h(rec, limit_of(rec, H), 1) == 0
    shifted = {2: H[2] + 0.25}
    assert delta_h(rec, limit_of(rec, shifted), 1) == pytest.approx(0.25)
    y = rec.outputs[:, 0]
    assert delta_y(rec, y, 1) == 0
    assert delta_y(rec, y + np.array([0.0, 0.3, 0.4]), 1) == pytest.approx(0.5)


def test_delta_h_contract():
    H = {2: np.zeros((2, 1, 4))}
    rec = record(H)
    with pytest.raises(ContractViolationError):
        delta_h(rec, limit_of(rec, H, coupled=False), 0)
    with pytest.raises(ContractViolationError):
        delta_h(record(H, coupling=UNCOUPLED), limit_of(rec, H), 0)
    with pytest.raises(ContractViolationError):
        delta_h(rec, LimitTrajectory(H, rec.outputs[:, 0], True, "other"), 0)
    with pytest.raises(ContractViolationError):
        delta_h(rec, limit_of(rec, {2: np.zeros((2, 1, 5))}), 0)
    with pytest.raises(ContractViolationError):
        delta_h(rec, limit_of(rec, {1: np.zeros((2, 1, 4))}), 0)


def test_error_record_validation():
    with pytest.raises(InvalidInputError):
        ErrorRecord("r", 2, 2, 4, 1, 0, 0, 0.1, 0.1)
    with pytest.raises(InvalidInputError):
        ErrorRecord("r", 2, 2, 4, ShapeConfig(2, 2, 4).n_params, 0, 0, -1.0, 0.1)


# ---------------------------------------------------------------- fits


def test_fit_recovers_planted_noiseless():
    fit = fit_rate(planted(), "h_rate")
    assert abs(fit.alpha - 0.67) < 1e-6 and abs(fit.beta - 0.44) < 1e-6
    assert fit.r2 == pytest.approx(1.0)


def test_fit_under_noise():
    gen = np.random.default_rng(7)
    coefs = np.array([[f.alpha, f.beta] for f in (fit_rate(planted(noise=0.2, gen=gen)) for _ in range(100))])
    rel = np.abs(coefs.mean(axis=0) / np.array([0.67, 0.44]) - 1)
    assert np.all(rel < 0.15)


def test_fit_single_term_regime():
    fit = fit_rate(planted(alpha=0.0, beta=0.44), "h_rate")
    assert fit.beta == pytest.approx(0.44, abs=1e-6)
    assert fit.alpha < 1e-4


def test_fit_underdetermined():
    recs = [ErrorRecord("r", 8, M, 16, ShapeConfig(8, M, 16).n_params, 0, 5, 0.1, 0.1) for M in (8, 16)]
    with pytest.raises(UnderdeterminedFitError):
        fit_rate(recs)
    # four shapes that move t1 and t2 in lockstep
    recs = [ErrorRecord("r", 1, D * D, D, ShapeConfig(1, D * D, D).n_params, 0, 5, 1 / np.sqrt(D), 0.1)
            for D in (4, 8, 16, 32)]
    with pytest.raises(UnderdeterminedFitError):
        fit_rate(recs)


def test_y_rate_model_recovers():
    shapes = [(L, M, D) for L in (8, 64) for M in (8, 64) for D in (8, 32, 128)]
    recs = [ErrorRecord("r", L, M, D, ShapeConfig(L, M, D).n_params, 0, 5, 1.0,
                        float(np.hypot(0.15 * D / (M * L), 0.9 / np.sqrt(D)))) for L, M, D in shapes]
    fit = fit_rate(recs, "y_rate")
    assert fit.alpha == pytest.approx(0.15, abs=1e-6) and fit.beta == pytest.approx(0.9, abs=1e-6)


@given(st.floats(-2.0, 2.0).filter(lambda s: abs(s) > 1e-3))
def test_powerlaw_slope_exact(s):
    x = np.array([8.0, 16, 32, 64, 128])
    fit = powerlaw_slope(x, 3.0 * x**s)
    assert abs(fit.slope - s) < 1e-12


def test_powerlaw_slope_examples_and_errors():
    x = np.logspace(1, 4, 6)
    assert powerlaw_slope(x, x**-0.5).slope == pytest.approx(-0.5, abs=1e-12)
    assert powerlaw_slope(x, x ** (-1 / 6)).slope == pytest.approx(-1 / 6, abs=1e-12)
    with pytest.raises(InvalidInputError):
        powerlaw_slope(x[:3], x[:3])
    with pytest.raises(InvalidInputError):
        powerlaw_slope(x, -x)


def test_loglog_slope_on_records():
    recs = [ErrorRecord("r", 4, 4, D, ShapeConfig(4, 4, D).n_params, s, 5, D**-0.5, 1.0)
            for D in (8, 16, 32, 64) for s in range(3)]
    assert loglog_slope(recs, "D").slope == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(InvalidInputError):
        loglog_slope(recs, "W")


def test_seed_average_variance_scaling():
    gen = np.random.default_rng(3)
    ns, var = [2, 4, 8, 16, 32], []
    for n in ns:
        means = []
        for rep in range(400):
            recs = [ErrorRecord("r", 2, 2, 4, ShapeConfig(2, 2, 4).n_params, s, 0, abs(1 + gen.standard_normal()), 1.0)
                    for s in range(n)]
            means.append(seed_average(recs)[0].delta_h)
        var.append(np.var(means))
    assert abs(np.polyfit(np.log(ns), np.log(var), 1)[0] + 1) < 0.3


# ---------------------------------------------------------------- KS


def test_ks_null_calibration():
    gen = np.random.default_rng(11)
    rejects = sum(histogram_ks(1.7 * gen.standard_normal(256), 1.7**2).p_value < 0.05 for _ in range(500))
    assert 0.03 <= rejects / 500 <= 0.08


def test_ks_power():
    coords = 2.0 * np.random.default_rng(0).standard_normal(1000)
    assert histogram_ks(coords, 1.0).p_value < 1e-3


def test_ks_input_checks():
    with pytest.raises(InvalidInputError):
        histogram_ks(np.zeros(10), 1.0)
    with pytest.raises(InvalidInputError):
        histogram_ks(np.zeros(100), 0.0)


def test_histogram_density_integrates():
    h = histogram_ks(np.random.default_rng(0).standard_normal(5000), 1.0, bins=40)
    assert h.counts.sum() == 5000
    assert np.sum(h.pdf_limit * np.diff(h.bin_edges)) <= 1.0


# ---------------------------------------------------------------- CLT


@pytest.mark.parametrize("f_id", ["linear", "quadratic"])
def test_clt_moment_matched_functions_have_no_gap(f_id):
    gaps = clt_empirical_gap(CltProbe([100, 1000], f_id=f_id, n_mc=200_000), rng_create(0, "clt"))
    for g in gaps:
        assert g.gap <= 3 * g.stderr + 1e-12


def test_clt_gaussian_summands_exact():
    gaps = clt_empirical_gap(CltProbe([100, 1000], f_id="tanh", y_dist="gaussian", n_mc=50_000), rng_create(0, "clt"))
    assert all(g.gap < 1e-12 for g in gaps)


def test_clt_gap_decreases():
    gaps = clt_empirical_gap(CltProbe([100, 10_000], f_id="tanh", n_mc=200_000), rng_create(0, "clt"))
    assert gaps[1].gap < gaps[0].gap / 5


def test_clt_threads_deterministic():
    probe = CltProbe([100, 400, 1600], f_id="cubic_ratio", n_mc=20_000)
    a = clt_empirical_gap(probe, rng_create(4, "clt"), threads=1)
    b = clt_empirical_gap(probe, rng_create(4, "clt"), threads=3)
    assert a == b


def test_clt_probe_validation():
    with pytest.raises(InvalidConfigError):
        CltProbe([102])
    with pytest.raises(InvalidConfigError):
        CltProbe([100], f_id="relu")
    assert np.allclose(np.trace(CltProbe([100]).sigma), 1.0)


# ---------------------------------------------------------------- CSV


def test_errors_csv_round_trip(tmp_path):
    recs = planted() + [ErrorRecord("x", 2, 2, 4, ShapeConfig(2, 2, 4).n_params, 1, 0, float("nan"), 1 / 3)]
    p = tmp_path / "errors.csv"
    emit_csv(recs, p)
    back = read_errors_csv(p)
    assert back[:-1] == recs[:-1]
    assert np.isnan(back[-1].delta_h) and back[-1].delta_y == 1 / 3


def test_other_csv_round_trips(tmp_path):
    fits = [RateFit("h_rate", 0.1 + 1e-17, 2 / 3, 0.99, 12)]
    emit_csv(fits, tmp_path / "fits.csv")
    f = read_fits_csv(tmp_path / "fits.csv")[0]
    assert (f.alpha, f.beta, f.r2, f.n_points) == (fits[0].alpha, 2 / 3, 0.99, 12)
    gaps = [CltGap("tanh", 100, 1 / 7, 1e-9)]
    emit_csv(gaps, tmp_path / "clt.csv")
    assert read_clt_csv(tmp_path / "clt.csv") == gaps


def test_empty_csv_is_header_only(tmp_path):
    emit_csv([], tmp_path / "errors.csv")
    assert (tmp_path / "errors.csv").read_text() == "run_id,L,M,D,P,seed,k,delta_h,delta_y,wall_ms\n"
    assert read_errors_csv(tmp_path / "errors.csv") == []


# ---------------------------------------------------------------- sweeps


def sweep_cfg(**kw):
    base = dict(shapes=[(2, 4, 8)], seeds=[0], K=0, hp=HP)
    base.update(kw)
    return SweepConfig(**base)


def test_sweep_k0_records_initialization_only():
    res = run_sweep(sweep_cfg())
    assert len(res.records) == 1 and res.records[0].k == 0
    # at layer L the blocks already move h by about sqrt(D/ML) at initialization
    assert 0 < res.records[0].delta_h < np.inf


def test_layer_zero_matches_limit_at_initialization():
    from resnet_limits.bench import linear_target
    from resnet_limits.dmft import reference_proxy
    from resnet_limits.linear_limit import coupled_limit_hidden
    from resnet_limits.resnet import train

    cfg = sweep_cfg()
    shape = cfg.shapes[0]
    rng = rng_create(0, cfg.stream)
    rec = train(shape, cfg.hp, cfg.act, cfg.data, 0, record_layers=[0], rng=rng)
    key = embedding_key(rec.W_in, rec.W_out)
    H = coupled_limit_hidden(linear_target(cfg), rec.W_in, rec.W_out, 0)[:1, None, :]
    assert delta_h(rec, LimitTrajectory({0: H}, None, True, key), 0) < 1e-12
    prox = reference_proxy(ShapeConfig(4, 16, 32), cfg.hp, cfg.act, cfg.data, 0, rng.child("proxy"),
                           embed_rng=rng, record_layers=[0])
    Hp = {0: prox.hidden[0][:, :, : shape.D]}
    assert delta_h(rec, LimitTrajectory(Hp, None, True, key), 0) == 0


def test_sweep_row_count_and_determinism(tmp_path):
    cfg = sweep_cfg(shapes=[(2, 4, 8), (2, 8, 8), (4, 4, 16)], seeds=[0, 1, 2, 3], K=2)
    a, b = run_sweep(cfg, threads=1), run_sweep(cfg, threads=4)
    assert len(a.records) == 12 * (cfg.K + 1) and not a.failures
    emit_csv(a.records, tmp_path / "a.csv")
    emit_csv(b.records, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(r.delta_h > 0 for r in a.records if r.k > 0)


def test_sweep_uncoupled_leaves_delta_h_undefined():
    res = run_sweep(sweep_cfg(K=1, coupling=UNCOUPLED))
    assert all(np.isnan(r.delta_h) for r in res.records)
    assert all(np.isfinite(r.delta_y) for r in res.records)


def test_sweep_proxy_target():
    cfg = sweep_cfg(K=1, target=Target.PROXY, act=activations.tanh(), proxy_shape=ShapeConfig(4, 16, 32))
    res = run_sweep(cfg)
    assert not res.failures and len(res.records) == 2
    assert all(np.isfinite(r.delta_h) and r.delta_h > 0 for r in res.records)


def test_sweep_config_validation():
    with pytest.raises(InvalidConfigError):
        sweep_cfg(act=activations.tanh())
    with pytest.raises(InvalidConfigError):
        sweep_cfg(target=Target.PROXY, proxy_shape=ShapeConfig(3, 16, 32))
    with pytest.raises(InvalidConfigError):
        sweep_cfg(seeds=[])
    assert sweep_cfg().config_hash() == sweep_cfg(threads=3).config_hash()
