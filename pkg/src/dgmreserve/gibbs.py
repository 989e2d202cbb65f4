"""Gibbs sampler for the dependent gamma model with latent-count augmentation.

Each full conditional is evaluated from sufficient statistics gathered over
the observed cells only: rows are observed on a prefix ``j = 0 .. n-1-i``, so
every latent count that enters an observed cell's shape is itself attached
to an observed cell and the augmented likelihood never touches the lower
triangle.

Positive scalars (alpha, beta, gamma, hyper shapes) are updated by one
slice-sampling step on the log scale; latent counts are drawn exactly by
enumeration; hyper rates are conjugate gamma draws.  The inner loops are
compiled with numba and take an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba as nb
import numpy as np
import pandas as pd
from scipy import stats

from . import kernel
from .kernel import make_discrete_sampler, make_slice_sampler
from .model import DgmParams, lag_correlations, ultimates_and_proportions, window_sum
from .triangles import InputError, ModelSpec, RunConfig, TransformSpec, TrianglePanel

HYPER_NAMES = DgmParams.HYPER_NAMES
GROUPS = ("alpha", "beta", "gamma")

# block codes reported in failure context
BLOCK_NAMES = ("z", "alpha", "beta", "gamma", "hyper_shape", "hyper_rate")


class NumericalError(RuntimeError):
    """A conditional produced a non-finite density or failed to sample."""


# --- compiled building blocks ------------------------------------------------------

@nb.njit(nogil=True, cache=True)
def _rate(beta, gamma, p, j, k):
    b = beta[j, k]
    for l in range(p + 1):
        if j - l < 0:
            break
        b += gamma[j - l, k]
    return b


@nb.njit(nogil=True, cache=True)
def _zsum(z, p, i, j, k):
    s = 0
    for l in range(p + 1):
        if j - l < 0:
            break
        s += z[i, j - l, k]
    return s


@nb.njit(nogil=True, cache=True)
def _alpha_logpdf(v, args):
    c1, c2, shifts = args
    out = -c1 * v + c2 * math.log(v)
    for s in shifts:
        out -= math.lgamma(v + s)
    return out


@nb.njit(nogil=True, cache=True)
def _beta_logpdf(v, args):
    total_shape, gsum, rate, shape_m1 = args
    return total_shape * math.log(v + gsum) - rate * v + shape_m1 * math.log(v)


@nb.njit(nogil=True, cache=True)
def _gamma_logpdf(v, args):
    coef, offset, rate, shape_m1 = args
    out = -rate * v + shape_m1 * math.log(v)
    for r in range(coef.size):
        if coef[r] != 0.0:
            out += coef[r] * math.log(offset[r] + v)
    return out


@nb.njit(nogil=True, cache=True)
def _shape_logpdf(v, args):
    K, log_rate, sum_log, a0, b0 = args
    return K * v * log_rate - K * math.lgamma(v) + v * sum_log + (a0 - 1.0) * math.log(v) - b0 * v


@nb.njit(nogil=True, cache=True)
def _z_logw(m, args):
    c, base = args
    out = m * c - math.lgamma(m + 1.0)
    for b in base:
        out -= math.lgamma(b + m)
    return out


_slice_alpha = make_slice_sampler(_alpha_logpdf)
_slice_beta = make_slice_sampler(_beta_logpdf)
_slice_gamma = make_slice_sampler(_gamma_logpdf)
_slice_shape = make_slice_sampler(_shape_logpdf)
_sample_z = make_discrete_sampler(_z_logw)


@nb.njit(nogil=True, cache=True)
def _draw_alpha(i, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng):
    n = alpha.shape[0]
    c1 = hyp[1, i]
    c2 = hyp[0, i] - 1.0
    m = 0
    for j in range(n):
        if obs[i, j]:
            m += 1
    shifts = np.empty(m)
    t = 0
    for j in range(n):
        if not obs[i, j]:
            continue
        c1 += gamma[j, k] - math.log(_rate(beta, gamma, p, j, k)) - math.log(x[i, j, k])
        c2 += z[i, j, k]
        shifts[t] = _zsum(z, p, i, j, k)
        t += 1
    return _slice_alpha((c1, c2, shifts), alpha[i, k], width, rng)


@nb.njit(nogil=True, cache=True)
def _draw_beta(j, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng):
    n = alpha.shape[0]
    total_shape = 0.0
    rate = hyp[3, j]
    for i in range(n):
        if obs[i, j]:
            total_shape += alpha[i, k] + _zsum(z, p, i, j, k)
            rate += x[i, j, k]
    gsum = 0.0
    for l in range(p + 1):
        if j - l < 0:
            break
        gsum += gamma[j - l, k]
    return _slice_beta((total_shape, gsum, rate, hyp[2, j] - 1.0),
                          beta[j, k], width, rng)


@nb.njit(nogil=True, cache=True)
def _draw_gamma(j, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng):
    n = alpha.shape[0]
    coef = np.zeros(p + 1)
    offset = np.ones(p + 1)
    rate = hyp[5, j]
    shape_m1 = hyp[4, j] - 1.0
    for i in range(n):
        if obs[i, j]:
            rate += alpha[i, k]
            shape_m1 += z[i, j, k]
    for r in range(p + 1):
        jr = j + r
        if jr >= n:
            break
        # rate of column jr without the gamma being updated
        off = beta[jr, k]
        for l in range(p + 1):
            if jr - l < 0:
                break
            if l != r:
                off += gamma[jr - l, k]
        offset[r] = off
        for i in range(n):
            if obs[i, jr]:
                coef[r] += alpha[i, k] + _zsum(z, p, i, jr, k)
                rate += x[i, jr, k]
    return _slice_gamma((coef, offset, rate, shape_m1), gamma[j, k], width, rng)


@nb.njit(nogil=True, cache=True)
def _draw_z(i, j, k, x, obs, p, alpha, beta, gamma, z, tail_tol, rng):
    n = alpha.shape[0]
    if gamma[j, k] <= 0.0:
        return 0, kernel.OK
    c = math.log(alpha[i, k]) + math.log(gamma[j, k])
    m = 0
    for r in range(p + 1):
        if j + r < n and obs[i, j + r]:
            m += 1
    base = np.empty(m)
    t = 0
    for r in range(p + 1):
        jr = j + r
        if jr >= n or not obs[i, jr]:
            continue
        c += math.log(_rate(beta, gamma, p, jr, k)) + math.log(x[i, jr, k])
        base[t] = alpha[i, k] + _zsum(z, p, i, jr, k) - z[i, j, k]
        t += 1
    return _sample_z((c, base), rng, tail_tol)


@nb.njit(nogil=True, cache=True)
def _group_values(g, idx, alpha, beta, gamma):
    if g == 0:
        return alpha[idx]
    if g == 1:
        return beta[idx]
    return gamma[idx]


@nb.njit(nogil=True, cache=True)
def _draw_hyper_shape(g, idx, alpha, beta, gamma, hyp, h0, width, rng):
    vals = _group_values(g, idx, alpha, beta, gamma)
    sum_log = 0.0
    for v in vals:
        sum_log += math.log(v)
    args = (float(vals.size), math.log(hyp[2 * g + 1, idx]), sum_log, h0[2 * g], h0[2 * g + 1])
    return _slice_shape(args, hyp[2 * g, idx], width, rng)


@nb.njit(nogil=True, cache=True)
def _draw_hyper_rate(g, idx, alpha, beta, gamma, hyp, h0, rng):
    vals = _group_values(g, idx, alpha, beta, gamma)
    shape = h0[2 * g] + vals.size * hyp[2 * g, idx]
    rate = h0[2 * g + 1] + vals.sum()
    return rng.gamma(shape, 1.0 / rate)


@nb.njit(nogil=True, cache=True)
def _fail(err, status, block, i, j, k):
    err[0] = status
    err[1] = block
    err[2] = i
    err[3] = j
    err[4] = k
    return False


@nb.njit(nogil=True, cache=True)
def _sweep(x, obs, p, h0, alpha, beta, gamma, z, hyp, width, tail_tol, rng, err):
    n, K = alpha.shape
    for k in range(K):
        for i in range(n):
            for j in range(n):
                if obs[i, j]:
                    v, status = _draw_z(i, j, k, x, obs, p, alpha, beta, gamma, z, tail_tol, rng)
                    if status != kernel.OK:
                        return _fail(err, status, 0, i, j, k)
                    z[i, j, k] = v
    for k in range(K):
        for i in range(n):
            v, status = _draw_alpha(i, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng)
            if status != kernel.OK:
                return _fail(err, status, 1, i, -1, k)
            alpha[i, k] = v
    for k in range(K):
        for j in range(n):
            v, status = _draw_beta(j, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng)
            if status != kernel.OK:
                return _fail(err, status, 2, -1, j, k)
            beta[j, k] = v
    for k in range(K):
        for j in range(n):
            v, status = _draw_gamma(j, k, x, obs, p, alpha, beta, gamma, z, hyp, width, rng)
            if status != kernel.OK:
                return _fail(err, status, 3, -1, j, k)
            gamma[j, k] = v
    for g in range(3):
        for idx in range(n):
            v, status = _draw_hyper_shape(g, idx, alpha, beta, gamma, hyp, h0, width, rng)
            if status != kernel.OK:
                return _fail(err, status, 4, g, idx, -1)
            hyp[2 * g, idx] = v
            hyp[2 * g + 1, idx] = _draw_hyper_rate(g, idx, alpha, beta, gamma, hyp, h0, rng)
    return True


@nb.njit(nogil=True, cache=True)
def _deviance(x, obs, p, alpha, beta, gamma, z):
    n, K = alpha.shape
    ll = 0.0
    for k in range(K):
        for i in range(n):
            for j in range(n):
                if not obs[i, j]:
                    continue
                a = alpha[i, k] + _zsum(z, p, i, j, k)
                b = _rate(beta, gamma, p, j, k)
                xv = x[i, j, k]
                ll += a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(xv) - b * xv
    return -2.0 * ll


@nb.njit(nogil=True, cache=True)
def _run_chain(x, obs, p, h0, alpha, beta, gamma, z, hyp, burn_in, keep, thin, width, tail_tol,
               rng, out_alpha, out_beta, out_gamma, out_z, out_hyp, out_dev, err):
    for _ in range(burn_in):
        if not _sweep(x, obs, p, h0, alpha, beta, gamma, z, hyp, width, tail_tol, rng, err):
            return False
    for m in range(keep):
        for _ in range(thin):
            if not _sweep(x, obs, p, h0, alpha, beta, gamma, z, hyp, width, tail_tol, rng, err):
                return False
        out_alpha[m] = alpha
        out_beta[m] = beta
        out_gamma[m] = gamma
        out_z[m] = z
        out_hyp[m] = hyp
        out_dev[m] = _deviance(x, obs, p, alpha, beta, gamma, z)
    return True


# --- Python-level API ---------------------------------------------------------------

@dataclass
class GibbsState:
    """Current parameter values, iteration counter and the chain's own RNG stream."""

    params: DgmParams
    rng: np.random.Generator
    iteration: int = 0
    scan_order: tuple = ("z", "alpha", "beta", "gamma", "hyper")


def model_arrays(panel: TrianglePanel):
    """``(x, obs)`` arrays for the compiled kernels.

    Unobserved cells are filled with 1.0; they are never read.  The result
    is cached on the (immutable) panel and must not be modified.
    """
    cached = panel.__dict__.get("_model_arrays")
    if cached is not None:
        return cached
    mask = np.asarray(panel.observed_mask)
    obs = mask[:, :, 0].copy()
    if not np.all(mask == obs[:, :, None]):
        raise InputError("observed cells must coincide across businesses")
    for i in range(panel.n):
        row = obs[i]
        m = int(row.sum())
        if not np.all(row[:m]) or np.any(row[m:]):
            raise InputError(f"row {i} is not observed on a prefix of development years")
    cells = np.asarray(panel.cells)
    if np.any(cells[mask] <= 0):
        raise InputError("observed cells must be strictly positive; apply floor_zeros first")
    x = np.ascontiguousarray(np.where(mask, cells, 1.0), dtype=np.float64)
    object.__setattr__(panel, "_model_arrays", (x, obs))
    return x, obs


def _as_p(spec) -> int:
    return int(spec.p) if isinstance(spec, ModelSpec) else int(spec)


def _status_error(status, what):
    if status == kernel.BAD_START:
        return NumericalError(f"{what}: non-finite log density at the current value")
    if status == kernel.STEP_OUT_LIMIT:
        return NumericalError(f"{what}: slice stepping-out limit exceeded")
    if status == kernel.ENUMERATION_LIMIT:
        return NumericalError(f"{what}: enumeration exceeded {kernel.MAX_STATES} states")
    return NumericalError(f"{what}: sampler failure (status {status})")


def _state_arrays(state: GibbsState):
    prm = state.params
    return prm.alpha, prm.beta, prm.gamma, prm.z, np.ascontiguousarray(prm.hyper)


def cond_alpha(i: int, k: int, state: GibbsState, panel: TrianglePanel, p, width: float = 1.0) -> float:
    """One slice draw of ``alpha[i, k]`` from its full conditional."""
    x, obs = model_arrays(panel)
    alpha, beta, gamma, z, hyp = _state_arrays(state)
    v, status = _draw_alpha(i, k, x, obs, _as_p(p), alpha, beta, gamma, z, hyp, width, state.rng)
    if status != kernel.OK:
        raise _status_error(status, f"alpha[{i}, {k}]")
    return v


def cond_beta(j: int, k: int, state: GibbsState, panel: TrianglePanel, p, width: float = 1.0) -> float:
    x, obs = model_arrays(panel)
    alpha, beta, gamma, z, hyp = _state_arrays(state)
    v, status = _draw_beta(j, k, x, obs, _as_p(p), alpha, beta, gamma, z, hyp, width, state.rng)
    if status != kernel.OK:
        raise _status_error(status, f"beta[{j}, {k}]")
    return v


def cond_gamma(j: int, k: int, state: GibbsState, panel: TrianglePanel, p, width: float = 1.0) -> float:
    """One slice draw of ``gamma[j, k]``.

    ``gamma[j]`` enters the rates of columns ``j .. j+p``; columns beyond the
    last development year carry no data and contribute nothing.
    """
    x, obs = model_arrays(panel)
    alpha, beta, gamma, z, hyp = _state_arrays(state)
    v, status = _draw_gamma(j, k, x, obs, _as_p(p), alpha, beta, gamma, z, hyp, width, state.rng)
    if status != kernel.OK:
        raise _status_error(status, f"gamma[{j}, {k}]")
    return v


def cond_z(i: int, j: int, k: int, state: GibbsState, panel: TrianglePanel, p,
           tail_tol: float = 1e-12) -> int:
    """Exact draw of the latent count of observed cell ``(i, j, k)``."""
    x, obs = model_arrays(panel)
    if not obs[i, j]:
        raise ValueError(f"cell ({i}, {j}) is not observed")
    alpha, beta, gamma, z, _ = _state_arrays(state)
    v, status = _draw_z(i, j, k, x, obs, _as_p(p), alpha, beta, gamma, z, tail_tol, state.rng)
    if status != kernel.OK:
        raise _status_error(status, f"z[{i}, {j}, {k}]")
    return int(v)


def cond_hyper_shape(group: str, index: int, state: GibbsState, spec: ModelSpec, width: float = 1.0) -> float:
    """Slice draw of the shape hyperparameter of ``group`` (alpha, beta or gamma) at ``index``."""
    g = GROUPS.index(group)
    alpha, beta, gamma, _, hyp = _state_arrays(state)
    v, status = _draw_hyper_shape(g, index, alpha, beta, gamma, hyp, spec.hyperprior, width, state.rng)
    if status != kernel.OK:
        raise _status_error(status, f"a_{group}[{index}]")
    return v


def cond_hyper_rate(group: str, index: int, state: GibbsState, spec: ModelSpec) -> float:
    """Conjugate draw ``b ~ Gamma(b_shape0 + K a, b_rate0 + sum_k param_k)``."""
    g = GROUPS.index(group)
    alpha, beta, gamma, _, hyp = _state_arrays(state)
    return float(_draw_hyper_rate(g, index, alpha, beta, gamma, hyp, spec.hyperprior, state.rng))


def gibbs_sweep(state: GibbsState, panel: TrianglePanel, spec: ModelSpec, width: float = 1.0,
                tail_tol: float = 1e-12) -> GibbsState:
    """Update every block once in the fixed order z, alpha, beta, gamma, hyperparameters (in place)."""
    x, obs = model_arrays(panel)
    prm = state.params
    hyp = np.ascontiguousarray(prm.hyper)
    err = np.zeros(5, dtype=np.int64)
    ok = _sweep(x, obs, spec.p, spec.hyperprior, prm.alpha, prm.beta, prm.gamma, prm.z, hyp,
                width, tail_tol, state.rng, err)
    _unpack_hyper(prm, hyp)
    if not ok:
        raise _sweep_error(err, state.iteration)
    state.iteration += 1
    return state


def _unpack_hyper(prm: DgmParams, hyp):
    for row, name in enumerate(HYPER_NAMES):
        setattr(prm, name, hyp[row].copy())


def _sweep_error(err, iteration):
    status, block, i, j, k = (int(v) for v in err)
    name = BLOCK_NAMES[block]
    if name == "hyper_shape":
        where = f"a_{GROUPS[i]}[{j}]"
    else:
        where = f"{name}[" + ", ".join(str(v) for v in (i, j, k) if v >= 0) + "]"
    return _status_error(status, f"sweep {iteration}, {where}")


def augmented_loglik(panel: TrianglePanel, params: DgmParams, p: int) -> float:
    """Joint log density of observed claims and their latent counts given parameters.

    Evaluated with ``scipy.stats`` densities cell by cell.
    """
    x, obs = model_arrays(panel)
    S = window_sum(params.z, p, axis=1)
    B = params.beta + window_sum(params.gamma, p)
    shape = params.alpha[:, None, :] + S
    rate = np.broadcast_to(B[None, :, :], shape.shape)
    lam = params.alpha[:, None, :] * params.gamma[None, :, :]
    mask = np.broadcast_to(obs[:, :, None], shape.shape)
    lg = stats.gamma.logpdf(x[mask], a=shape[mask], scale=1.0 / rate[mask])
    lp = stats.poisson.logpmf(params.z[mask], lam[mask])
    total = lg + lp
    if not np.all(np.isfinite(total)):
        bad = np.argwhere(mask)[np.flatnonzero(~np.isfinite(total))[0]]
        raise NumericalError(f"non-finite augmented log-likelihood at cell {tuple(int(v) for v in bad)}")
    return float(total.sum())


def conditional_deviance(panel_or_x, obs, alpha, beta, gamma, z, p: int) -> float:
    """``-2 log f(x | theta, z)`` over observed cells (no latent-count term)."""
    x = panel_or_x
    return float(_deviance(np.ascontiguousarray(x, dtype=float), obs, int(p),
                           np.ascontiguousarray(alpha, dtype=float),
                           np.ascontiguousarray(beta, dtype=float),
                           np.ascontiguousarray(gamma, dtype=float),
                           np.ascontiguousarray(z, dtype=np.int64)))


def log_prior(params: DgmParams, spec: ModelSpec) -> float:
    """Log density of the hierarchical prior at ``params`` (all three levels)."""
    h0 = spec.hyperprior
    out = 0.0
    for g, (name, values) in enumerate(zip(GROUPS, (params.alpha, params.beta, params.gamma))):
        a = getattr(params, f"a_{name}")
        b = getattr(params, f"b_{name}")
        out += stats.gamma.logpdf(values, a=a[:, None], scale=1.0 / b[:, None]).sum()
        out += stats.gamma.logpdf(a, a=h0[2 * g], scale=1.0 / h0[2 * g + 1]).sum()
        out += stats.gamma.logpdf(b, a=h0[2 * g], scale=1.0 / h0[2 * g + 1]).sum()
    return float(out)


def initial_state(panel: TrianglePanel, spec: ModelSpec, rng: np.random.Generator,
                  jitter: float = 0.5) -> GibbsState:
    """Method-of-moments start, perturbed per chain.

    alpha from observed row means, beta from the ratio of the mean alpha to
    observed column means, gamma and hyperparameters at their prior means,
    latent counts at zero.  alpha, beta and gamma are then multiplied by
    ``exp(U(-jitter, jitter))`` so that chains start apart.
    """
    x, obs = model_arrays(panel)
    n, K = panel.n, panel.K
    w = obs[:, :, None].astype(float)
    row_mean = (x * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1.0)
    col_mean = (x * w).sum(axis=0) / np.maximum(w.sum(axis=0), 1.0)
    alpha = np.maximum(row_mean, 1e-3)
    beta = np.maximum(alpha.mean(axis=0, keepdims=True) / np.maximum(col_mean, 1e-12), 1e-3)
    gamma = np.full((n, K), spec.a_gamma0 / spec.b_gamma0)
    if jitter > 0:
        alpha = alpha * np.exp(rng.uniform(-jitter, jitter, size=alpha.shape))
        beta = beta * np.exp(rng.uniform(-jitter, jitter, size=beta.shape))
        gamma = gamma * np.exp(rng.uniform(-jitter, jitter, size=gamma.shape))
    h0 = spec.hyperprior
    hyper = {name: np.full(n, h0[2 * (r // 2)] / h0[2 * (r // 2) + 1]) for r, name in enumerate(HYPER_NAMES)}
    params = DgmParams(alpha=alpha, beta=beta, gamma=gamma, z=np.zeros((n, n, K), dtype=np.int64), **hyper)
    return GibbsState(params=params, rng=rng)


def chain_streams(seed: int, chains: int) -> list[np.random.Generator]:
    """Independent PCG64 streams: chain ``c`` uses child ``c`` of ``SeedSequence(seed)``."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(chains)]


@dataclass
class PosteriorSamples:
    """Kept draws with a leading (chain, draw) pair of axes."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    z: np.ndarray
    hyper: np.ndarray
    deviance: np.ndarray
    spec: ModelSpec
    run: RunConfig
    meta: dict = field(default_factory=dict)

    @property
    def chains(self) -> int:
        return self.alpha.shape[0]

    @property
    def draws(self) -> int:
        return self.alpha.shape[1]

    @property
    def n(self) -> int:
        return self.alpha.shape[2]

    @property
    def K(self) -> int:
        return self.alpha.shape[3]

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((-1,) + arr.shape[2:])

    def identifiable(self) -> dict:
        """Per-draw ultimates, development proportions and lag-1..p correlations."""
        p = self.spec.p
        a_star, pi_star = ultimates_and_proportions(self.alpha, self.beta, self.gamma, p)
        out = {"alpha_star": a_star, "pi_star": pi_star}
        for s in range(1, min(p, self.n - 1) + 1):
            out[f"rho_lag{s}"] = lag_correlations(self.gamma, p, s)
        return out

    def posterior_mean_params(self) -> DgmParams:
        hyper = self.hyper.reshape(-1, 6, self.n).mean(axis=0)
        return DgmParams(alpha=self.flat("alpha").mean(axis=0), beta=self.flat("beta").mean(axis=0),
                         gamma=self.flat("gamma").mean(axis=0),
                         z=np.rint(self.flat("z").mean(axis=0)).astype(np.int64),
                         **{name: hyper[r] for r, name in enumerate(HYPER_NAMES)})

    # serialisation: one long CSV per block plus meta.json
    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        obs = np.asarray(self.meta.get("observed", np.ones((self.n, self.n), bool)), dtype=bool)
        _write_block(directory / "alpha.csv", self.alpha)
        _write_block(directory / "beta.csv", self.beta)
        _write_block(directory / "gamma.csv", self.gamma)
        _write_block(directory / "z.csv", self.z, keep=np.repeat(obs[:, :, None], self.K, axis=2))
        for r, name in enumerate(HYPER_NAMES):
            _write_block(directory / f"{name}.csv", self.hyper[:, :, r, :])
        for name, arr in self.identifiable().items():
            _write_block(directory / f"{name}.csv", arr)
        C, M = self.deviance.shape
        pd.DataFrame({"chain": np.repeat(np.arange(1, C + 1), M), "draw": np.tile(np.arange(1, M + 1), C),
                      "value": self.deviance.ravel()}).to_csv(directory / "deviance.csv", index=False)
        meta = {k: v for k, v in self.meta.items() if k != "wall_time"}  # keep reruns byte-identical
        meta["observed"] = obs.astype(int).tolist()
        meta.update(spec=_spec_dict(self.spec), run=asdict(self.run),
                    deviance={"mean": float(self.deviance.mean()), "sd": float(self.deviance.std()),
                              "min": float(self.deviance.min())})
        (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "PosteriorSamples":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise InputError(f"{directory} is not a samples directory (no meta.json)")
        meta = json.loads(meta_path.read_text())
        spec = _spec_from_dict(meta.pop("spec"))
        run = RunConfig(**meta.pop("run"))
        meta.pop("deviance", None)
        n, K = int(meta["n"]), int(meta["K"])
        C, M = run.chains, run.keep
        alpha = _read_block(directory / "alpha.csv", (C, M, n, K))
        beta = _read_block(directory / "beta.csv", (C, M, n, K))
        gamma = _read_block(directory / "gamma.csv", (C, M, n, K))
        z = _read_block(directory / "z.csv", (C, M, n, n, K)).astype(np.int64)
        hyper = np.stack([_read_block(directory / f"{name}.csv", (C, M, n)) for name in HYPER_NAMES], axis=2)
        dev = pd.read_csv(directory / "deviance.csv", float_precision="round_trip")
        deviance = np.zeros((C, M))
        deviance[dev["chain"].to_numpy() - 1, dev["draw"].to_numpy() - 1] = dev["value"].to_numpy()
        return cls(alpha=alpha, beta=beta, gamma=gamma, z=z, hyper=hyper, deviance=deviance,
                   spec=spec, run=run, meta=meta)


def diagnostics_table(samples: PosteriorSamples, level: float = 0.9) -> pd.DataFrame:
    """Posterior summary and psrf of every identifiable quantity (1-based indices)."""
    rows = []
    for name, arr in samples.identifiable().items():
        inner = arr.shape[2:]
        for pos in np.ndindex(*inner):
            s = kernel.summarize_chains(arr[(slice(None), slice(None)) + pos], level)
            rows.append({"parameter": name, "index": ",".join(str(v + 1) for v in pos), "mean": s.mean,
                         "median": s.median, "sd": s.sd, "hpd_lower": s.hpd[0], "hpd_upper": s.hpd[1],
                         "psrf": s.psrf})
    return pd.DataFrame(rows)


def _spec_dict(spec: ModelSpec) -> dict:
    return asdict(spec)


def _spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["transform"] = TransformSpec(**d["transform"])
    return ModelSpec(**d)


def _write_block(path, arr, keep=None):
    arr = np.asarray(arr)
    C, M = arr.shape[:2]
    inner = arr.shape[2:]
    positions = np.argwhere(np.ones(inner, bool) if keep is None else keep)
    labels = np.array([",".join(str(v + 1) for v in pos) for pos in positions])
    flat = arr.reshape(C, M, -1)[:, :, np.ravel_multi_index(positions.T, inner)]
    P = len(positions)
    df = pd.DataFrame({
        "chain": np.repeat(np.arange(1, C + 1), M * P),
        "draw": np.tile(np.repeat(np.arange(1, M + 1), P), C),
        "index": np.tile(labels, C * M),
        "value": flat.ravel(),
    })
    df.to_csv(path, index=False)


def _read_block(path, shape):
    if not Path(path).exists():
        raise InputError(f"missing samples file {path}")
    df = pd.read_csv(path, dtype={"index": str}, float_precision="round_trip")
    out = np.zeros(shape)
    idx = np.array([[int(v) - 1 for v in s.split(",")] for s in df["index"].unique()])
    lookup = dict(zip(df["index"].unique(), range(len(idx))))
    pos = idx[df["index"].map(lookup).to_numpy()]
    key = (df["chain"].to_numpy() - 1, df["draw"].to_numpy() - 1) + tuple(pos.T)
    out[key] = df["value"].to_numpy()
    return out


def _run_one_chain(panel, x, obs, spec: ModelSpec, run: RunConfig, rng):
    state = initial_state(panel, spec, rng)
    prm = state.params
    n, K = prm.n, prm.K
    keep = run.keep
    out = (np.empty((keep, n, K)), np.empty((keep, n, K)), np.empty((keep, n, K)),
           np.empty((keep, n, n, K), dtype=np.int64), np.empty((keep, 6, n)), np.empty(keep))
    err = np.zeros(5, dtype=np.int64)
    hyp = np.ascontiguousarray(prm.hyper)
    ok = _run_chain(x, obs, spec.p, spec.hyperprior, prm.alpha, prm.beta, prm.gamma, prm.z, hyp,
                    run.burn_in, keep, run.thin, run.slice_width, run.tail_tol, rng, *out, err)
    if not ok:
        raise _sweep_error(err, -1)
    return out


def run_chains(panel: TrianglePanel, spec: ModelSpec, run: RunConfig) -> PosteriorSamples:
    """Run ``run.chains`` independent chains, each on its own seeded stream.

    Chains are executed on a thread pool of ``run.threads`` workers (the
    compiled loop releases the GIL); results do not depend on the worker count.
    """
    spec.check_depth(panel.n)
    x, obs = model_arrays(panel)
    streams = chain_streams(run.seed, run.chains)
    started = time.perf_counter()
    workers = run.threads or min(run.chains, 8)
    if workers > 1 and run.chains > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda rng: _run_one_chain(panel, x, obs, spec, run, rng), streams))
    else:
        results = [_run_one_chain(panel, x, obs, spec, run, rng) for rng in streams]
    wall = time.perf_counter() - started
    alpha, beta, gamma, z, hyp, dev = (np.stack(parts) for parts in zip(*results))
    meta = {"n": panel.n, "K": panel.K, "seed": int(run.seed), "wall_time": wall,
            "business_ids": list(panel.business_ids),
            "origin_labels": [int(v) for v in panel.origin_labels],
            "dev_labels": [int(v) for v in panel.dev_labels], "observed": obs.astype(int).tolist(),
            "scan_order": list(GibbsState.__dataclass_fields__["scan_order"].default)}
    return PosteriorSamples(alpha=alpha, beta=beta, gamma=gamma, z=z, hyper=hyp, deviance=dev,
                            spec=spec, run=run, meta=meta)
