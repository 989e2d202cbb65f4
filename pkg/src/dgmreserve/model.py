"""Dependent gamma model: parameter container, moment algebra and forward simulation.

Generative model, for origin year i, development year j and business k::

    Z[i, j, k] ~ Poisson(alpha[i, k] * gamma[j, k])
    X[i, j, k] | Z ~ Gamma(alpha[i, k] + sum_{l=0..p} Z[i, j-l, k],
                           beta[j, k] + sum_{l=0..p} gamma[j-l, k])    (shape, rate)

with Z and gamma taken as zero for development years before the first.
Shared latent counts make claims up to ``p`` development years apart
positively correlated.  All functions use 0-based indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .triangles import TrianglePanel, calibration_mask


def window_sum(a, p: int, axis: int = -2) -> np.ndarray:
    """``out[j] = a[j] + a[j-1] + ... + a[j-p]`` along ``axis`` (terms before 0 dropped)."""
    a = np.asarray(a)
    a = np.moveaxis(a, axis, -1)
    cs = np.cumsum(a, axis=-1)
    out = cs.copy()
    if p + 1 < a.shape[-1]:
        out[..., p + 1:] -= cs[..., : -(p + 1)]
    return np.moveaxis(out, -1, axis)


@dataclass
class DgmParams:
    """Full parameter state.

    ``alpha`` is indexed (origin, business), ``beta`` and ``gamma`` are
    indexed (development, business), ``z`` is (origin, development, business).
    The six hyperparameter vectors have length ``n``: ``a_alpha``/``b_alpha``
    per origin year, the others per development year.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    z: np.ndarray | None = None
    a_alpha: np.ndarray | None = None
    b_alpha: np.ndarray | None = None
    a_beta: np.ndarray | None = None
    b_beta: np.ndarray | None = None
    a_gamma: np.ndarray | None = None
    b_gamma: np.ndarray | None = None

    HYPER_NAMES = ("a_alpha", "b_alpha", "a_beta", "b_beta", "a_gamma", "b_gamma")

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=float, ndmin=2)
        n, K = self.alpha.shape
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=float), (n, K)).copy()
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (n, K)).copy()
        if self.z is None:
            self.z = np.zeros((n, n, K), dtype=np.int64)
        else:
            self.z = np.array(self.z, dtype=np.int64)
        for name in self.HYPER_NAMES:
            value = getattr(self, name)
            value = np.ones(n) if value is None else np.broadcast_to(np.asarray(value, float), (n,)).copy()
            setattr(self, name, value)
        if np.any(self.alpha <= 0) or np.any(self.beta <= 0):
            raise ValueError("alpha and beta must be positive")
        if np.any(self.gamma < 0):
            raise ValueError("gamma must be nonnegative")
        if np.any(self.z < 0):
            raise ValueError("latent counts must be nonnegative")

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def K(self) -> int:
        return self.alpha.shape[1]

    @property
    def hyper(self) -> np.ndarray:
        """Hyperparameters stacked as a (6, n) array in ``HYPER_NAMES`` order."""
        return np.stack([getattr(self, name) for name in self.HYPER_NAMES])

    def gamma_at(self, j: int, k: int) -> float:
        return float(self.gamma[j, k]) if j >= 0 else 0.0

    def z_at(self, i: int, j: int, k: int) -> int:
        return int(self.z[i, j, k]) if j >= 0 else 0

    def copy(self) -> "DgmParams":
        return DgmParams(self.alpha.copy(), self.beta.copy(), self.gamma.copy(), self.z.copy(),
                         *(getattr(self, name).copy() for name in self.HYPER_NAMES))


def benchmark_params(K: int = 2, n: int = 4) -> DgmParams:
    """Simulation-study setup: alpha = k per business, beta = 1, gamma = (1, 4, 6, 2), p = 1."""
    gamma = np.array([1.0, 4.0, 6.0, 2.0])
    if n != 4:
        gamma = np.resize(gamma, n)
    alpha = np.tile(np.arange(1, K + 1, dtype=float), (n, 1))
    return DgmParams(alpha=alpha, beta=np.ones((n, K)), gamma=np.tile(gamma[:, None], (1, K)))


# --- closed-form moments ----------------------------------------------------------

def _rate_sum(beta, gamma, p):
    return beta + window_sum(gamma, p)


def development_weights(beta, gamma, p: int) -> np.ndarray:
    """``pi[j, k] = (1 + sum_l gamma[j-l]) / (beta[j] + sum_l gamma[j-l])``; broadcasts over leading axes."""
    g = window_sum(gamma, p)
    return (1.0 + g) / (beta + g)


def cell_mean(params: DgmParams, p: int, i: int, j: int, k: int) -> float:
    g = sum(params.gamma_at(j - l, k) for l in range(p + 1))
    return float(params.alpha[i, k] * (1.0 + g) / (params.beta[j, k] + g))


def cell_variance(params: DgmParams, p: int, i: int, j: int, k: int) -> float:
    g = sum(params.gamma_at(j - l, k) for l in range(p + 1))
    return float(params.alpha[i, k] * (1.0 + 2.0 * g) / (params.beta[j, k] + g) ** 2)


def cell_covariance(params: DgmParams, p: int, i: int, j: int, s: int, k: int) -> float:
    """Covariance of claims ``s >= 1`` development years apart in the same row.

    Zero when ``s > p``; claims from different origin years or businesses are
    independent by construction and have no entry point here.
    """
    if s < 1:
        raise ValueError("lag s must be >= 1")
    if s > p:
        return 0.0
    shared = sum(params.gamma_at(j - l, k) for l in range(p - s + 1))
    b1 = params.beta[j, k] + sum(params.gamma_at(j - l, k) for l in range(p + 1))
    b2 = params.beta[j + s, k] + sum(params.gamma_at(j + s - l, k) for l in range(p + 1))
    return float(params.alpha[i, k] * shared / (b1 * b2))


def dev_correlation(gamma_col, p: int, j: int, s: int) -> float:
    """Correlation between development years ``j`` and ``j + s`` of one business.

    Depends on the gamma column only, not on origin year, alpha or beta.
    """
    if s < 1 or s > p:
        raise ValueError(f"correlation defined for 1 <= s <= p; got s={s}, p={p}")
    g = np.asarray(gamma_col, dtype=float)
    if j < 0 or j + s >= g.size:
        raise ValueError(f"development years {j} and {j + s} out of range for n={g.size}")

    def at(m):
        return g[m] if m >= 0 else 0.0

    shared = sum(at(j - l) for l in range(p - s + 1))
    v1 = 1.0 + 2.0 * sum(at(j - l) for l in range(p + 1))
    v2 = 1.0 + 2.0 * sum(at(j + s - l) for l in range(p + 1))
    return float(shared / np.sqrt(v1 * v2))


def lag_correlations(gamma, p: int, s: int = 1) -> np.ndarray:
    """Vectorised correlations for lag ``s``: shape ``(..., n - s, K)`` from ``gamma`` of shape ``(..., n, K)``."""
    gamma = np.asarray(gamma, dtype=float)
    if s < 1 or s > p:
        raise ValueError(f"correlation defined for 1 <= s <= p; got s={s}, p={p}")
    shared = window_sum(gamma, p - s)
    v = 1.0 + 2.0 * window_sum(gamma, p)
    return shared[..., :-s, :] / np.sqrt(v[..., :-s, :] * v[..., s:, :])


def ultimates_and_proportions(alpha, beta, gamma, p: int):
    """Identifiable ``(alpha_star, pi_star)``, broadcasting over leading axes."""
    w = development_weights(beta, gamma, p)
    total = w.sum(axis=-2, keepdims=True)
    return alpha * total, w / total


@dataclass
class MomentReport:
    mu: np.ndarray
    alpha_star: np.ndarray
    pi_star: np.ndarray
    corr: dict = field(default_factory=dict)  # lag s -> (n - s, K) array


def identifiable_params(params: DgmParams, p: int) -> MomentReport:
    alpha_star, pi_star = ultimates_and_proportions(params.alpha, params.beta, params.gamma, p)
    mu = alpha_star[:, None, :] * pi_star[None, :, :]
    corr = {s: lag_correlations(params.gamma, p, s) for s in range(1, min(p, params.n - 1) + 1)}
    return MomentReport(mu=mu, alpha_star=alpha_star, pi_star=pi_star, corr=corr)


# --- simulation -------------------------------------------------------------------

def simulate_cells(params: DgmParams, p: int, rng: np.random.Generator, size: int | None = None):
    """Draw full ``(n, n, K)`` squares of claims and latent counts.

    With ``size`` given, a leading replicate axis is added.  Returns ``(x, z)``.
    """
    n, K = params.n, params.K
    shape = (n, n, K) if size is None else (size, n, n, K)
    lam = params.alpha[:, None, :] * params.gamma[None, :, :]
    z = rng.poisson(np.broadcast_to(lam, shape))
    shape_par = params.alpha[:, None, :] + window_sum(z, p, axis=-2)
    rate = _rate_sum(params.beta, params.gamma, p)[None, :, :]
    x = rng.standard_gamma(shape_par) / rate
    return x, z.astype(np.int64)


def simulate_panel(params: DgmParams, p: int, rng: np.random.Generator):
    """Full-square panel with the upper triangle marked observed, plus the latent counts."""
    if p >= params.n:
        raise ValueError(f"dependence order p={p} must be smaller than n={params.n}")
    x, z = simulate_cells(params, p, rng)
    panel = TrianglePanel(cells=x, observed_mask=calibration_mask(params.n, params.K))
    return panel, z
