"""Chain-ladder and the over-dispersed Poisson residual bootstrap.

Triangles here are single ``(n, n)`` arrays of incremental claims on the
original money scale, NaN where unobserved, observed on a row prefix.  The
ODP model's point predictions coincide with the chain-ladder, so fitted
incrementals come from the usual backwards allocation of the latest
diagonal rather than from a GLM fit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .predict import ReserveSummary
from .triangles import InputError, TrianglePanel, calibration_mask

MAX_RETRIES = 100


@dataclass
class ChainLadderFit:
    """Volume-weighted chain-ladder with ODP fitted values.

    ``factors[j]`` links development years ``j`` and ``j + 1`` (0-based).
    ``fitted`` holds fitted incrementals on observed cells and projected
    incrementals on future cells.
    """

    factors: np.ndarray
    fitted: np.ndarray
    observed: np.ndarray
    phi: float
    residuals: np.ndarray
    dof: int
    reserves: np.ndarray = field(init=False)

    def __post_init__(self):
        self.reserves = np.where(self.observed, 0.0, self.fitted).sum(axis=1)

    @property
    def n(self) -> int:
        return self.fitted.shape[0]

    @property
    def total(self) -> float:
        return float(self.reserves.sum())


def _prefix_lengths(observed) -> np.ndarray:
    obs = np.asarray(observed, bool)
    lengths = obs.sum(axis=1)
    for i, m in enumerate(lengths):
        if not obs[i, :m].all():
            raise InputError(f"row {i} is not observed on a prefix")
    return lengths


def _factors(cum, lengths):
    """Volume-weighted factors over rows observing both columns; cum may carry a leading batch axis."""
    n = cum.shape[-1]
    f = np.ones(cum.shape[:-2] + (n - 1,))
    ok = np.ones(cum.shape[:-2], dtype=bool)
    for j in range(n - 1):
        rows = lengths >= j + 2
        if not rows.any():
            continue  # no information beyond this lag; carry forward unchanged
        num = cum[..., rows, j + 1].sum(axis=-1)
        den = cum[..., rows, j].sum(axis=-1)
        good = den > 0
        ok &= good
        f[..., j] = np.where(good, num / np.where(good, den, 1.0), 1.0)
    return f, ok


def _project(cum, lengths, f):
    """Future incrementals from each row's latest cumulative value."""
    n = cum.shape[-1]
    out = np.zeros(cum.shape)
    for i in range(n):
        d = lengths[i] - 1
        if d < 0:
            continue
        c = cum[..., i, d]
        for j in range(d + 1, n):
            nxt = c * f[..., j - 1]
            out[..., i, j] = nxt - c
            c = nxt
    return out


def chain_ladder(triangle, observed=None) -> ChainLadderFit:
    """Chain-ladder fit of one incremental triangle.

    Parameters
    ----------
    triangle : array_like, shape (n, n)
        Incremental claims; NaN marks unobserved cells unless ``observed``
        is given.
    observed : array_like of bool, optional
    """
    x = np.asarray(triangle, dtype=float)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise InputError(f"triangle must be square, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise InputError("chain-ladder needs n >= 2")
    obs = np.isfinite(x) if observed is None else np.asarray(observed, bool)
    lengths = _prefix_lengths(obs)
    if np.any(lengths == 0):
        raise InputError("every origin year needs at least one observed cell")
    xo = np.where(obs, x, 0.0)
    cum = np.cumsum(xo, axis=1)
    f, ok = _factors(cum, lengths)
    if not ok:
        raise ZeroDivisionError("zero cumulative column sum in a development factor")

    fitted = _project(cum, lengths, f)
    # backwards allocation: fitted cumulatives end at the latest observed value
    for i in range(n):
        d = lengths[i] - 1
        chat = np.empty(d + 1)
        chat[d] = cum[i, d]
        for j in range(d - 1, -1, -1):
            chat[j] = chat[j + 1] / f[j]
        fitted[i, : d + 1] = np.diff(chat, prepend=0.0)

    n_obs = int(obs.sum())
    dof = n_obs - (2 * n - 1)
    m = np.where(obs, fitted, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(obs & (m > 0), (xo - m) / np.sqrt(np.abs(m)), 0.0)
    phi = float((r ** 2).sum() / dof) if dof > 0 else 0.0
    return ChainLadderFit(factors=f, fitted=fitted, observed=obs, phi=phi, residuals=r, dof=dof)


def process_error(mean, phi: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma draws with mean ``m`` and variance ``phi * |m|``; negative means mirror the sign."""
    m = np.asarray(mean, dtype=float)
    if phi <= 0:
        return m.copy()
    a = np.abs(m)
    draw = np.where(a > 0, rng.gamma(np.where(a > 0, a / phi, 1.0), phi), 0.0)
    return np.sign(m) * draw


@dataclass
class OdpDraws:
    """Bootstrap reserve draws for one triangle: ``by_origin`` has shape (B, n)."""

    by_origin: np.ndarray
    deterministic: np.ndarray
    phi: float
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.by_origin.sum(axis=1)


def odp_bootstrap(triangle, B: int, rng: np.random.Generator, observed=None, phi: float | None = None) -> OdpDraws:
    """Residual bootstrap of the ODP chain-ladder with gamma process error.

    Adjusted Pearson residuals ``r * sqrt(N / (N - (2n - 1)))`` are resampled
    with replacement onto the fitted incrementals, each pseudo-triangle is
    refitted, its projection is perturbed by process error with variance
    ``phi * m``.  Pseudo-triangles with a non-positive cumulative column sum
    are redrawn, at most ``MAX_RETRIES`` times each.

    ``phi`` overrides the Pearson dispersion (``0`` switches process error off).
    """
    if B < 100:
        raise ValueError(f"bootstrap needs B >= 100, got {B}")
    fit = chain_ladder(triangle, observed)
    obs = fit.observed
    lengths = obs.sum(axis=1)
    n = fit.n
    N = int(obs.sum())
    scale = math.sqrt(N / fit.dof) if fit.dof > 0 else 0.0
    pool = fit.residuals[obs] * scale
    m_obs = fit.fitted[obs]
    root = np.sqrt(np.abs(m_obs))
    disp = fit.phi if phi is None else float(phi)

    def resample(size):
        r = pool[rng.integers(0, pool.size, size=(size, pool.size))]
        pseudo = np.zeros((size, n, n))
        pseudo[:, obs] = m_obs + r * root
        cum = np.cumsum(pseudo, axis=2)
        f, ok = _factors(cum, lengths)
        return cum, f, ok

    cum, f, ok = resample(B)
    retries = 0
    while not ok.all():
        retries += 1
        if retries > MAX_RETRIES:
            raise RuntimeError(f"{int((~ok).sum())} bootstrap resamples still invalid after {MAX_RETRIES} retries")
        bad = np.flatnonzero(~ok)
        c2, f2, ok2 = resample(bad.size)
        cum[bad], f[bad], ok[bad] = c2, f2, ok2
    future = _project(cum, lengths, f)
    future = np.where(obs[None], 0.0, future)
    future = process_error(future, disp, rng)
    meta = {"residuals": "Pearson, scaled by sqrt(N / (N - (2n - 1)))", "process": "gamma(mean m, var phi*m)",
            "phi": disp, "retries": retries, "factors": "volume-weighted, all origin years"}
    return OdpDraws(by_origin=future.sum(axis=2), deterministic=fit.reserves, phi=disp, meta=meta)


def odp_panel(panel: TrianglePanel, B: int, rng: np.random.Generator) -> tuple:
    """Independent ODP bootstraps per business on the original scale.

    Returns reserve draws keyed like the DGM aggregates and per-business
    bootstrap metadata.
    """
    cells = panel.original_cells()
    obs = calibration_mask(panel.n, 1)[:, :, 0]
    per_business = []
    out = {}
    meta = {}
    for k, b in enumerate(panel.business_ids):
        draws = odp_bootstrap(np.where(obs, cells[:, :, k], np.nan), B, rng)
        per_business.append(draws)
        meta[str(b)] = {"phi": draws.phi, "retries": draws.meta["retries"]}
    out["total"] = sum(d.total for d in per_business)
    for k, b in enumerate(panel.business_ids):
        out[f"business/{b}"] = per_business[k].total
    for k, b in enumerate(panel.business_ids):
        for i, label in enumerate(panel.origin_labels):
            if not obs[i].all():
                out[f"origin/{b}/{label}"] = per_business[k].by_origin[:, i]
    return out, meta


COMPARE_COLUMNS = ("aggregate", "dgm_median", "odp_median", "diff_median", "dgm_mean", "odp_mean", "diff_mean",
                   "dgm_lower", "dgm_upper", "odp_lower", "odp_upper", "dgm_width", "odp_width", "diff_width")


def compare_models(dgm: ReserveSummary, odp: ReserveSummary, truth: dict | None = None) -> pd.DataFrame:
    """Side-by-side point estimates and interval widths, with coverage when ``truth`` is given.

    Difference columns are DGM minus ODP.
    """
    if dgm.scale != odp.scale:
        raise InputError(f"scale mismatch: DGM summary is {dgm.scale}, ODP summary is {odp.scale}")
    rows = []
    for name in dgm.aggregates():
        if name not in odp.aggregates():
            continue
        row = {"aggregate": name}
        for tag, s in (("dgm", dgm), ("odp", odp)):
            row[f"{tag}_median"] = s.get(name, "median")
            row[f"{tag}_mean"] = s.get(name, "mean")
            row[f"{tag}_lower"] = s.get(name, "lower")
            row[f"{tag}_upper"] = s.get(name, "upper")
            row[f"{tag}_width"] = row[f"{tag}_upper"] - row[f"{tag}_lower"]
        for stat in ("median", "mean", "width"):
            row[f"diff_{stat}"] = row[f"dgm_{stat}"] - row[f"odp_{stat}"]
        if truth is not None and name in truth:
            t = float(truth[name])
            row["truth"] = t
            row["dgm_covers"] = int(row["dgm_lower"] <= t <= row["dgm_upper"])
            row["odp_covers"] = int(row["odp_lower"] <= t <= row["odp_upper"])
        rows.append(row)
    cols = list(COMPARE_COLUMNS)
    if truth is not None:
        cols += ["truth", "dgm_covers", "odp_covers"]
    return pd.DataFrame(rows).reindex(columns=cols)


def histogram_export(dgm_draws, odp_draws, bins: int = 50, truth: float | None = None) -> pd.DataFrame:
    """Both predictive distributions binned on a common grid, as densities."""
    a = np.asarray(dgm_draws, float).ravel()
    b = np.asarray(odp_draws, float).ravel()
    edges = np.histogram_bin_edges(np.concatenate([a, b]), bins=bins)
    da, _ = np.histogram(a, bins=edges, density=True)
    db, _ = np.histogram(b, bins=edges, density=True)
    out = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "dgm_density": da, "odp_density": db,
                        "overlap": np.minimum(da, db)})
    if truth is not None:
        out["truth"] = float(truth)
    return out
