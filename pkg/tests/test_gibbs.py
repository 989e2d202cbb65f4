import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dgmreserve.gibbs import (NumericalError, PosteriorSamples, augmented_loglik, chain_streams, cond_gamma,
                              cond_hyper_rate, cond_z, conditional_deviance, diagnostics_table, gibbs_sweep,
                              initial_state, model_arrays, run_chains)
from dgmreserve.model import DgmParams, benchmark_params, simulate_panel
from dgmreserve.triangles import InputError, ModelSpec, RunConfig, TrianglePanel, calibration_mask
from oracles import chisquare_pvalue, fixed_configuration, new_state, z_pmf

SPEC = ModelSpec(p=1, a_alpha0=2.0, b_alpha0=1.0, a_beta0=2.0, b_beta0=2.0, a_gamma0=3.0, b_gamma0=1.0)


def scipy_deviance(panel, params, p):
    x, obs = model_arrays(panel)
    total = 0.0
    n, K = params.n, params.K
    for k in range(K):
        for i in range(n):
            for j in range(n):
                if not obs[i, j]:
                    continue
                shape = params.alpha[i, k] + sum(params.z[i, j - l, k] for l in range(p + 1) if j - l >= 0)
                rate = params.beta[j, k] + sum(params.gamma[j - l, k] for l in range(p + 1) if j - l >= 0)
                total += stats.gamma.logpdf(x[i, j, k], shape, scale=1 / rate)
    return -2 * total


def test_deviance_two_routes_agree():
    panel, params = fixed_configuration()
    x, obs = model_arrays(panel)
    for p in (0, 1, 2):
        fast = conditional_deviance(x, obs, params.alpha, params.beta, params.gamma, params.z, p)
        assert fast == pytest.approx(scipy_deviance(panel, params, p), rel=1e-10)


def test_augmented_loglik_names_bad_cell():
    panel, params = fixed_configuration()
    params.gamma[2, 1] = 0.0
    params.z[0, 2, 1] = 1
    with pytest.raises(NumericalError, match=r"\(0, 2, 1\)"):
        augmented_loglik(panel, params, 1)


def test_cond_z_zero_rate_gives_zero():
    panel, params = fixed_configuration()
    params.gamma[1, 0] = 0.0
    state = new_state(params, 0)
    assert all(cond_z(0, 1, 0, state, panel, SPEC) == 0 for _ in range(20))


def test_cond_z_rejects_unobserved_cell():
    panel, params = fixed_configuration()
    with pytest.raises(ValueError):
        cond_z(3, 3, 0, new_state(params, 0), panel, SPEC)


def test_cond_z_p2_matches_enumeration():
    spec = ModelSpec(p=2)
    panel, params = fixed_configuration()
    cell = (0, 0, 1)  # enters the shapes of development years 0, 1, 2
    pmf = z_pmf(panel, params, spec, cell)
    state = new_state(params, 3)
    draws = np.array([cond_z(*cell, state, panel, spec) for _ in range(4000)])
    assert chisquare_pvalue(draws, pmf) > 1e-3


def test_hyper_rate_moments():
    panel, params = fixed_configuration()
    state = new_state(params, 9)
    draws = np.array([cond_hyper_rate("gamma", 1, state, SPEC) for _ in range(20000)])
    shape = SPEC.a_gamma0 + params.K * params.a_gamma[1]
    rate = SPEC.b_gamma0 + params.gamma[1].sum()
    assert abs(draws.mean() - shape / rate) < 4 * draws.std() / np.sqrt(draws.size)


def test_cond_gamma_stays_positive():
    panel, params = fixed_configuration()
    state = new_state(params, 1)
    for _ in range(200):
        params_v = cond_gamma(3, 1, state, panel, SPEC)
        state.params.gamma[3, 1] = params_v
        assert params_v > 0


@given(st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_sweep_keeps_support(p, seed):
    rng = np.random.default_rng(seed)
    n, K = 3, 2
    params = DgmParams(alpha=rng.uniform(0.5, 3, (n, K)), beta=rng.uniform(0.5, 2, (n, K)),
                       gamma=rng.uniform(0.2, 4, (n, K)))
    panel, _ = simulate_panel(params, p, rng)
    spec = ModelSpec(p=p)
    state = initial_state(panel, spec, rng)
    for _ in range(3):
        gibbs_sweep(state, panel, spec)
    prm = state.params
    for arr in (prm.alpha, prm.beta, prm.gamma, prm.hyper):
        assert np.all(np.isfinite(arr)) and np.all(arr > 0)
    assert np.all(prm.z >= 0)
    assert np.all(prm.z[~panel.observed_mask] == 0)
    assert state.iteration == 3


def test_sweep_is_deterministic():
    panel, params = fixed_configuration()
    a, b = new_state(params, 42), new_state(params, 42)
    for _ in range(5):
        gibbs_sweep(a, panel, SPEC)
        gibbs_sweep(b, panel, SPEC)
    np.testing.assert_array_equal(a.params.alpha, b.params.alpha)
    np.testing.assert_array_equal(a.params.z, b.params.z)


def test_model_arrays_validation():
    cells = np.ones((3, 3, 1))
    mask = calibration_mask(3)
    bad = mask.copy()
    bad[0, 1, 0] = False
    with pytest.raises(InputError, match="prefix"):
        model_arrays(TrianglePanel(cells=cells, observed_mask=bad))
    zero = cells.copy()
    zero[0, 0, 0] = 0.0
    with pytest.raises(InputError, match="positive"):
        model_arrays(TrianglePanel(cells=zero, observed_mask=mask))


def test_chain_streams_are_distinct_and_reproducible():
    a = [g.random() for g in chain_streams(5, 3)]
    b = [g.random() for g in chain_streams(5, 3)]
    assert a == b and len(set(a)) == 3


@pytest.fixture(scope="module")
def short_fit():
    panel, _ = simulate_panel(benchmark_params(), 1, np.random.default_rng(7))
    return panel, run_chains(panel, SPEC, RunConfig(chains=2, burn_in=200, keep=100, seed=3))


def test_run_chains_shapes_and_thread_invariance(short_fit):
    panel, s = short_fit
    assert s.alpha.shape == (2, 100, 4, 2) and s.z.shape == (2, 100, 4, 4, 2)
    assert s.hyper.shape == (2, 100, 6, 4) and s.deviance.shape == (2, 100)
    again = run_chains(panel, SPEC, RunConfig(chains=2, burn_in=200, keep=100, seed=3, threads=1))
    np.testing.assert_array_equal(s.alpha, again.alpha)
    np.testing.assert_array_equal(s.deviance, again.deviance)
    other = run_chains(panel, SPEC, RunConfig(chains=2, burn_in=200, keep=100, seed=4))
    assert not np.array_equal(s.alpha, other.alpha)


def test_recorded_deviance_matches_state(short_fit):
    panel, s = short_fit
    x, obs = model_arrays(panel)
    c, m = 1, 57
    d = conditional_deviance(x, obs, s.alpha[c, m], s.beta[c, m], s.gamma[c, m], s.z[c, m], 1)
    assert d == pytest.approx(s.deviance[c, m], rel=1e-12)


def test_thinning_keeps_every_thin_th_sweep():
    panel, _ = simulate_panel(benchmark_params(), 1, np.random.default_rng(7))
    thin = run_chains(panel, SPEC, RunConfig(chains=1, burn_in=0, keep=3, thin=2, seed=8))
    full = run_chains(panel, SPEC, RunConfig(chains=1, burn_in=0, keep=6, thin=1, seed=8))
    np.testing.assert_array_equal(thin.alpha[0], full.alpha[0, 1::2])


def test_samples_roundtrip(tmp_path, short_fit):
    _, s = short_fit
    s.save(tmp_path / "s")
    back = PosteriorSamples.load(tmp_path / "s")
    for name in ("alpha", "beta", "gamma", "z", "hyper", "deviance"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
    assert back.spec == s.spec and back.run == s.run
    assert (tmp_path / "s" / "rho_lag1.csv").exists()
    with pytest.raises(InputError):
        PosteriorSamples.load(tmp_path)


def test_identifiable_and_diagnostics(short_fit):
    _, s = short_fit
    ident = s.identifiable()
    np.testing.assert_allclose(ident["pi_star"].sum(axis=2), 1.0, rtol=1e-12)
    table = diagnostics_table(s)
    assert len(table) == 8 + 8 + 6
    assert set(table["parameter"]) == {"alpha_star", "pi_star", "rho_lag1"}


def test_initial_state_jitter_separates_chains(bench_panel):
    a = initial_state(bench_panel, SPEC, np.random.default_rng(0))
    b = initial_state(bench_panel, SPEC, np.random.default_rng(1))
    assert not np.allclose(a.params.alpha, b.params.alpha)
    assert np.all(a.params.alpha > 0) and np.all(a.params.beta > 0)
