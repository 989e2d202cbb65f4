import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dgmreserve.gibbs import PosteriorSamples, conditional_deviance, model_arrays, run_chains
from dgmreserve.model import benchmark_params, simulate_panel
from dgmreserve.predict import (MIN_SUMMARY_DRAWS, ReserveSummary, dic, dic_components, expected_shortfall,
                                l_measure, l_measure_terms, model_grid_run, predictive_draws, reserve_summary,
                                score_fit, summarize_draws, prior_grid, true_reserves, value_at_risk)
from dgmreserve.triangles import InputError, ModelSpec, RunConfig, TransformSpec, TrianglePanel, apply_transform

SPEC = ModelSpec(p=1, a_alpha0=2.0, b_alpha0=1.0, a_beta0=2.0, b_beta0=2.0, a_gamma0=3.0, b_gamma0=1.0)


def make_samples(alpha, beta, gamma, z, spec, deviance=None, seed=0):
    """PosteriorSamples with one chain built from given draws (leading axis = draw)."""
    M = alpha.shape[0]
    n = alpha.shape[1]
    return PosteriorSamples(alpha=alpha[None], beta=beta[None], gamma=gamma[None], z=z[None],
                            hyper=np.ones((1, M, 6, n)),
                            deviance=np.zeros((1, M)) if deviance is None else deviance[None],
                            spec=spec, run=RunConfig(chains=1, burn_in=0, keep=M, seed=seed),
                            meta={"n": n, "K": alpha.shape[2]})


def tiled(params, M):
    return (np.repeat(params.alpha[None], M, 0), np.repeat(params.beta[None], M, 0),
            np.repeat(params.gamma[None], M, 0), np.repeat(params.z[None], M, 0))


@pytest.fixture(scope="module")
def bench():
    panel, z = simulate_panel(benchmark_params(), 1, np.random.default_rng(7))
    samples = run_chains(panel, SPEC, RunConfig(chains=2, burn_in=500, keep=500, seed=1))
    return panel, samples


# --- predictive draws ---------------------------------------------------------------

def test_single_future_cell_mean():
    # n=2, K=1, p=0: only cell (1, 1) is unobserved
    rng = np.random.default_rng(0)
    M = 20000
    alpha = rng.gamma(5.0, 0.4, size=(M, 2, 1))
    beta = rng.gamma(4.0, 0.5, size=(M, 2, 1))
    gamma = rng.gamma(2.0, 0.5, size=(M, 2, 1))
    z = np.zeros((M, 2, 2, 1), dtype=np.int64)
    spec = ModelSpec(p=0)
    panel = TrianglePanel(cells=np.array([[[1.0], [2.0]], [[1.5], [np.nan]]]),
                          observed_mask=np.array([[[True], [True]], [[True], [False]]]))
    draws = predictive_draws(make_samples(alpha, beta, gamma, z, spec), panel, rng=rng)
    x = draws.cells[:, 1, 1, 0]
    mu = alpha[:, 1, 0] * (1 + gamma[:, 1, 0]) / (beta[:, 1, 0] + gamma[:, 1, 0])
    se = (x - mu).std() / math.sqrt(M)
    assert abs(x.mean() - mu.mean()) < 3 * se
    assert np.isnan(draws.cells[:, 0, 0, 0]).all()


def test_zero_gamma_makes_draws_independent_of_latent_counts(bench_panel):
    params = benchmark_params()
    params.gamma[:] = 0.0
    spec = ModelSpec(p=0)
    a, b, g, z = tiled(params, 50)
    z_other = z.copy()
    z_other[:, bench_panel.observed_mask[:, :, 0]] = 7
    d1 = predictive_draws(make_samples(a, b, g, z, spec), bench_panel, rng=np.random.default_rng(1))
    d2 = predictive_draws(make_samples(a, b, g, z_other, spec), bench_panel, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(d1.cells, d2.cells)


def test_aggregation_identities(bench):
    panel, samples = bench
    d = predictive_draws(samples, panel, rng=np.random.default_rng(2))
    assert d.N == 1000
    R_ik = d.by_origin
    assert np.array_equal(d.total, R_ik.sum(axis=1).sum(axis=1))
    agg = d.aggregates()
    assert np.array_equal(agg["total"], d.total)
    assert np.array_equal(agg["business/2"], R_ik[:, :, 1].sum(axis=1))
    assert "origin/1/1" not in agg  # fully developed row
    assert np.all(R_ik[:, 0, :] == 0)
    assert np.nanmin(d.cells) >= 0


def test_original_scale_back_transforms_each_cell(bench):
    panel, samples = bench
    t = TransformSpec(divisor=10.0, power=0.5)
    tpanel = panel.replace(transform=t)
    orig = predictive_draws(samples, tpanel, scale="original", rng=np.random.default_rng(3))
    model = predictive_draws(samples, tpanel, scale="transformed", rng=np.random.default_rng(3))
    np.testing.assert_allclose(orig.cells, t.inverse(model.cells), rtol=1e-12)
    with pytest.raises(InputError):
        predictive_draws(samples, tpanel, scale="log")


def test_dimension_mismatch(bench):
    _, samples = bench
    other, _ = simulate_panel(benchmark_params(K=3), 1, np.random.default_rng(0))
    with pytest.raises(InputError, match="n=4, K=2"):
        predictive_draws(samples, other)


# --- risk measures ------------------------------------------------------------------

def test_constant_draws():
    s = summarize_draws(np.full(500, 3.25))
    assert set(s.values()) == {3.25}


def test_hand_var_es():
    x = np.arange(1.0, 1001.0)
    assert value_at_risk(x, 0.995) == 995.0
    assert expected_shortfall(x, 0.995) == np.mean([995, 996, 997, 998, 999, 1000])
    assert value_at_risk(x, 0.5) == 500.0


draw_lists = arrays(float, st.integers(100, 400), elements=st.floats(0, 1e6, allow_nan=False))


def off_grid(q, N):
    # numpy takes the next order statistic when qN lands a rounding error above an integer; we snap back
    return abs(q * N - round(q * N)) > 1e-6


@given(draw_lists, st.floats(0.01, 0.999))
def test_var_is_numpy_inverted_cdf(x, q):
    assume(off_grid(q, x.size))
    assert value_at_risk(x, q) == np.quantile(x, q, method="inverted_cdf")


@given(draw_lists, st.floats(0.5, 0.99), st.floats(0.0, 0.009))
def test_var_monotone_and_es_dominates(x, q, dq):
    assert value_at_risk(x, q) <= value_at_risk(x, q + dq)
    assert expected_shortfall(x, q) >= value_at_risk(x, q)


@given(arrays(float, st.integers(100, 300), elements=st.integers(0, 10**6).map(float), unique=True),
       st.floats(0.8, 0.999))
def test_es_is_tail_order_statistics_mean(x, q):
    # without ties the draws >= VaR are exactly the sorted tail from the VaR order statistic
    assume(off_grid(q, x.size))
    s = np.sort(x)
    idx = int(np.searchsorted(s, np.quantile(x, q, method="inverted_cdf")))
    assert expected_shortfall(x, q) == pytest.approx(s[idx:].mean(), rel=1e-12)


@pytest.mark.parametrize("N,k", [(100, 80), (1000, 995), (1000, 990), (300, 270)])
def test_var_snaps_levels_to_grid(N, k):
    x = np.arange(1.0, N + 1)
    q = k / N
    for level in (q, np.nextafter(q, 1.0), q + 5e-13):
        assert value_at_risk(x, level) == k
    assert value_at_risk(x, q + 1e-6) == k + 1
    assert expected_shortfall(x, np.nextafter(q, 1.0)) == x[k - 1:].mean()


def test_summary_needs_draws():
    with pytest.raises(ValueError):
        summarize_draws(np.ones(MIN_SUMMARY_DRAWS - 1))


def test_reserve_summary_roundtrip(tmp_path, bench):
    panel, samples = bench
    s = reserve_summary(predictive_draws(samples, panel, rng=np.random.default_rng(4)))
    assert s.get("total", "var_0.995") >= s.get("total", "var_0.9")
    assert s.get("total", "es_0.995") >= s.get("total", "var_0.995")
    assert s.get("total", "lower") <= s.get("total", "median") <= s.get("total", "upper")
    path = s.to_csv(tmp_path / "reserves.csv")
    back = ReserveSummary.from_csv(path)
    pd.testing.assert_frame_equal(back.table, s.table)
    assert back.scale == "original" and (tmp_path / "reserves.csv.meta.json").exists()


# --- DIC --------------------------------------------------------------------------

def test_dic_degenerate_chain(bench_panel):
    params = benchmark_params()
    x, obs = model_arrays(bench_panel)
    params.z = np.where(bench_panel.observed_mask, 1, 0)
    d = conditional_deviance(x, obs, params.alpha, params.beta, params.gamma, params.z, 1)
    samples = make_samples(*tiled(params, 10), SPEC, deviance=np.full(10, d))
    comp = dic_components(samples, bench_panel)
    assert comp["pD"] == pytest.approx(0.0, abs=1e-9)
    assert comp["DIC"] == pytest.approx(d, rel=1e-12)


def test_dic_plugin_uses_rounded_mean_counts(bench):
    panel, samples = bench
    comp = dic_components(samples, panel)
    plug = samples.posterior_mean_params()
    assert plug.z.dtype == np.int64
    x, obs = model_arrays(panel)
    assert comp["Dhat"] == conditional_deviance(x, obs, plug.alpha, plug.beta, plug.gamma, plug.z, 1)
    assert comp["DIC"] == pytest.approx(2 * samples.deviance.mean() - comp["Dhat"])


@pytest.mark.slow
def test_dic_insensitive_to_thinning(bench_panel):
    a = run_chains(bench_panel, SPEC, RunConfig(chains=2, burn_in=2000, keep=20000, thin=1, seed=5))
    b = run_chains(bench_panel, SPEC, RunConfig(chains=2, burn_in=2000, keep=2000, thin=10, seed=6))
    da, db = dic(a, bench_panel), dic(b, bench_panel)
    assert abs(da - db) / abs(da) < 0.01


# --- L-measure ----------------------------------------------------------------------

def test_l_measure_affine_and_variance_term(bench):
    panel, samples = bench
    terms = l_measure_terms(samples, panel, "out-of-sample", rng=np.random.default_rng(5))
    assert terms.M == 2 * 4 * 3 // 2
    L0, L1, Lh = terms(0.0), terms(1.0), terms(0.5)
    assert abs(Lh - (L0 + 0.5 * (L1 - L0))) < 1e-12
    assert L0 == terms.variance
    same = l_measure(samples, panel, 0.5, "out-of-sample", rng=np.random.default_rng(5))
    assert same == Lh
    inside = l_measure_terms(samples, panel, "in-sample", rng=np.random.default_rng(5))
    assert inside.M == 2 * 4 * 5 // 2


def test_l_measure_single_draw(bench_panel):
    params = benchmark_params()
    samples = make_samples(*tiled(params, 1), SPEC)
    t = l_measure_terms(samples, bench_panel, "out-of-sample", rng=np.random.default_rng(0))
    assert t.variance == 0.0
    assert t(0.7) == pytest.approx(0.7 * t.bias2)


def test_l_measure_needs_truth(bench):
    panel, samples = bench
    upper = panel.replace(cells=np.where(panel.observed_mask, panel.cells, np.nan))
    with pytest.raises(InputError, match="held-out"):
        l_measure(samples, upper, 0.5, "out-of-sample")
    l_measure(samples, upper, 0.5, "in-sample")  # in-sample needs no truth
    with pytest.raises(InputError):
        l_measure(samples, panel, 1.5)


# --- model grid ---------------------------------------------------------------------

def test_prior_grid_order():
    grid = prior_grid()
    assert len(grid) == 24
    assert [g.p for g in grid[:6]] == list(range(6))
    assert (grid[6].a_alpha0, grid[6].a_beta0) == (10.0, 1.0)
    assert (grid[12].a_alpha0, grid[12].a_beta0) == (1.0, 10.0)
    assert (grid[23].p, grid[23].a_alpha0, grid[23].b_beta0) == (5, 10.0, 10.0)
    assert all(g.a_gamma0 == g.b_gamma0 == 10.0 for g in grid)


def test_grid_of_one_equals_direct_fit(bench_panel):
    run = RunConfig(chains=1, burn_in=100, keep=100, seed=2)
    table = model_grid_run(bench_panel, [SPEC], run)
    direct = score_fit(run_chains(bench_panel, SPEC, run), bench_panel)
    assert table.loc[0, "DIC"] == direct["DIC"]
    assert table.loc[0, "L_out"] == direct["L_out"]


def test_grid_duplicates_and_failures(bench_panel):
    run = RunConfig(chains=1, burn_in=50, keep=50, seed=2)
    table = model_grid_run(bench_panel, [SPEC, ModelSpec(p=4), SPEC], run)
    ok = table[table["status"] == "ok"]
    assert len(ok) == 2 and ok["DIC"].nunique() == 1
    failed = table[table["status"] != "ok"]
    assert failed["model_id"].tolist() == [2] and failed["DIC"].isna().all()
    assert table.index[table["model_id"] == 2][0] == 2  # failed rows rank last
    with pytest.raises(InputError):
        model_grid_run(bench_panel, [], run)


def test_true_reserves(bench_panel):
    truth = true_reserves(bench_panel)
    lower = np.where(bench_panel.observed_mask, 0.0, bench_panel.cells)
    assert truth["total"] == pytest.approx(lower.sum())
    assert truth["origin/1/4"] == pytest.approx(lower[3, :, 0].sum())
    tp = apply_transform(bench_panel, TransformSpec(divisor=2.0, power=0.5))
    assert true_reserves(tp)["total"] == pytest.approx(truth["total"], rel=1e-12)
