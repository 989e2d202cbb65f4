import math

import numba as nb
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dgmreserve.kernel import (LogDensity1D, batch_means_se, discrete_sample, hpd_interval, psrf, slice_sample,
                               summarize_chains)


@nb.njit
def gamma_logpdf(v, args):
    a, b = args
    return (a - 1.0) * math.log(v) - b * v


@nb.njit
def poisson_logw(m, args):
    lam = args[0]
    return m * math.log(lam) - math.lgamma(m + 1.0)


def run_slice(target, x0, n, args, seed=0):
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    x = x0
    for t in range(n):
        x = slice_sample(target, x, 1.0, rng, args)
        out[t] = x
    return out


def test_slice_python_callable_exponential():
    draws = run_slice(lambda v, a: -v, 1.0, 20000, ())
    se = batch_means_se(draws)
    assert abs(draws.mean() - 1.0) < 4 * se


def test_slice_jitted_gamma_matches_scipy():
    draws = run_slice(LogDensity1D(gamma_logpdf), 2.0, 20000, (5.0, 2.0))[::5]
    assert stats.kstest(draws, stats.gamma(5.0, scale=0.5).cdf).pvalue > 1e-3


def test_python_and_jitted_paths_agree():
    def py(v, args):
        a, b = args
        return (a - 1.0) * math.log(v) - b * v
    a = run_slice(py, 1.5, 200, (3.0, 1.0), seed=4)
    b = run_slice(gamma_logpdf, 1.5, 200, (3.0, 1.0), seed=4)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_slice_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        slice_sample(lambda v, a: -v, 1.0, 0.0, rng)
    with pytest.raises(ValueError):
        slice_sample(lambda v, a: -v, -1.0, 1.0, rng)
    with pytest.raises(ValueError):
        slice_sample(lambda v, a: -math.inf, 1.0, 1.0, rng)
    # flat density: the slice in log(x) is unbounded on the right
    with pytest.raises(RuntimeError):
        slice_sample(lambda v, a: 0.0, 1.0, 0.1, rng)


def test_discrete_poisson_exact():
    rng = np.random.default_rng(1)
    draws = np.array([discrete_sample(poisson_logw, rng, args=(3.0,)) for _ in range(20000)])
    counts = np.bincount(draws, minlength=12)[:12].astype(float)
    counts[-1] += (draws >= 12).sum()
    probs = stats.poisson(3.0).pmf(np.arange(12))
    probs[-1] += stats.poisson(3.0).sf(11)
    assert stats.chisquare(counts, probs * draws.size).pvalue > 1e-3


def test_discrete_point_mass_and_errors():
    rng = np.random.default_rng(0)
    assert discrete_sample(lambda m, a: 0.0 if m == 0 else -math.inf, rng) == 0
    # no mass anywhere: enumeration runs out before finding any
    with pytest.raises(RuntimeError):
        discrete_sample(nb.njit(lambda m, a: -math.inf), rng)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(0.05, 1.0))
def test_hpd_contains_required_mass_and_is_shortest(xs, level):
    lo, hi = hpd_interval(xs, level)
    s = np.sort(xs)
    m = max(1, math.ceil(level * len(s) - 1e-9))
    assert ((s >= lo) & (s <= hi)).sum() >= m
    widths = s[m - 1:] - s[: len(s) - m + 1]
    assert hi - lo == pytest.approx(widths.min())


def test_hpd_hand_example():
    assert hpd_interval([0, 1, 2, 3, 10], 0.6) == (0.0, 2.0)
    assert hpd_interval(np.full(10, 3.0), 0.9) == (3.0, 3.0)


def test_psrf():
    rng = np.random.default_rng(0)
    same = rng.normal(size=(2, 5000))
    assert psrf(same) < 1.01
    apart = same + np.array([[0.0], [5.0]])
    assert psrf(apart) > 2
    assert math.isnan(psrf(same[:1]))
    assert psrf(np.ones((2, 10))) == 1.0


def test_summarize_chains():
    s = summarize_chains(np.arange(200.0).reshape(2, 100))
    assert s.mean == pytest.approx(99.5)
    assert s.hpd[2] == 0.9
