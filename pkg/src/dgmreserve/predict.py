"""Posterior predictive reserves, risk measures and model-selection scores.

Reserves are sums of simulated lower-triangle cells: ``R[i, k]`` over the
future development years of row ``i``, ``R[k]`` over rows and ``R`` over
businesses.  Latent counts of future cells are not part of the posterior, so
each predictive draw samples them afresh from their Poisson prior given that
draw's ``alpha`` and ``gamma``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .gibbs import (PosteriorSamples, conditional_deviance, model_arrays, run_chains)
from .kernel import hpd_interval
from .model import window_sum
from .triangles import InputError, ModelSpec, RunConfig, TrianglePanel, calibration_mask

SCALES = ("original", "transformed")
DEFAULT_LEVELS = (0.9, 0.95, 0.99, 0.995)
MIN_SUMMARY_DRAWS = 100

# draws simulated per vectorised block; bounds peak memory on large panels
_CHUNK = 2000


@dataclass
class PredictiveDraws:
    """Simulated cells and reserves, one row per kept posterior draw.

    ``cells`` has shape ``(N, n, n, K)``; entries outside ``target`` are NaN.
    ``target`` marks the simulated cells (the future cells, or the observed
    ones for in-sample replicates).
    """

    cells: np.ndarray
    target: np.ndarray
    scale: str
    business_ids: tuple = ()
    origin_labels: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.cells.shape[0]

    @property
    def by_origin(self) -> np.ndarray:
        """``R[m, i, k]``: sum over simulated development years of each row."""
        return np.where(self.target[None], self.cells, 0.0).sum(axis=2)

    @property
    def by_business(self) -> np.ndarray:
        return self.by_origin.sum(axis=1)

    @property
    def total(self) -> np.ndarray:
        return self.by_business.sum(axis=1)

    def aggregates(self) -> dict:
        """Named reserve draws: ``total``, ``business/<id>`` and ``origin/<id>/<year>``."""
        R_ik = self.by_origin
        R_k = R_ik.sum(axis=1)
        out = {"total": R_k.sum(axis=1)}
        for k, b in enumerate(self.business_ids):
            out[f"business/{b}"] = R_k[:, k]
        for k, b in enumerate(self.business_ids):
            for i, label in enumerate(self.origin_labels):
                if self.target[i, :, k].any():
                    out[f"origin/{b}/{label}"] = R_ik[:, i, k]
        return out


def _draw_arrays(samples: PosteriorSamples):
    return (samples.flat("alpha"), samples.flat("beta"), samples.flat("gamma"), samples.flat("z"))


def _simulate(samples: PosteriorSamples, obs, rng, replicate: bool):
    """Predictive (future) or replicate (observed) cells on the model scale."""
    alpha, beta, gamma, z = _draw_arrays(samples)
    p = samples.spec.p
    N = alpha.shape[0]
    n, K = samples.n, samples.K
    target = obs if replicate else ~obs
    out = np.full((N, n, n, K), np.nan)
    for lo in range(0, N, _CHUNK):
        hi = min(N, lo + _CHUNK)
        a, b, g = alpha[lo:hi], beta[lo:hi], gamma[lo:hi]
        z_star = z[lo:hi].copy()
        if not replicate:
            fresh = rng.poisson(a[:, :, None, :] * g[:, None, :, :])
            z_star = np.where(obs[None, :, :, None], z_star, fresh)
        shape = a[:, :, None, :] + window_sum(z_star, p, axis=2)
        rate = np.broadcast_to((b + window_sum(g, p, axis=1))[:, None, :, :], shape.shape)
        # only the target cells consume random numbers
        block = out[lo:hi]
        block[:, target] = rng.standard_gamma(shape[:, target]) / rate[:, target]
    return out, target


def _check_shapes(samples: PosteriorSamples, panel: TrianglePanel):
    if (samples.n, samples.K) != (panel.n, panel.K):
        raise InputError(f"samples are for n={samples.n}, K={samples.K} but the panel has "
                         f"n={panel.n}, K={panel.K}")


def predictive_draws(samples: PosteriorSamples, panel: TrianglePanel, scale: str = "original",
                     rng: np.random.Generator | None = None, replicate: bool = False) -> PredictiveDraws:
    """Posterior predictive draws of the unobserved cells, one per kept draw.

    Parameters
    ----------
    scale : {"original", "transformed"}
        With ``"original"`` each simulated cell is mapped back through the
        panel's transform before any aggregation.
    rng : numpy.random.Generator, optional
        Defaults to a stream derived from the samples' seed.
    replicate : bool
        Simulate replicates of the observed cells instead, conditioning on
        the posterior latent counts (used by the in-sample L-measure).
    """
    if scale not in SCALES:
        raise InputError(f"scale must be one of {SCALES}, got {scale!r}")
    _check_shapes(samples, panel)
    _, obs = model_arrays(panel)
    if rng is None:
        rng = np.random.default_rng([int(samples.run.seed), 1])
    cells, target = _simulate(samples, obs, rng, replicate)
    target3 = np.repeat(target[:, :, None], panel.K, axis=2)
    if scale == "original" and panel.transform.enabled:
        cells = panel.transform.inverse(cells)
    return PredictiveDraws(cells=cells, target=target3, scale=scale, business_ids=tuple(panel.business_ids),
                           origin_labels=tuple(panel.origin_labels),
                           meta={"transform": asdict(panel.transform), "replicate": bool(replicate),
                                 "latent_future": "fresh Poisson(alpha * gamma) per draw"})


# --- risk measures ----------------------------------------------------------------

def _order_index(q: float, N: int) -> int:
    # inverse-CDF quantile: the ceil(qN)-th smallest draw; guard against qN landing just above an integer
    return min(N, max(1, math.ceil(q * N - 1e-9))) - 1


def value_at_risk(draws, q: float) -> float:
    """Inverse-CDF quantile, the ``ceil(qN)``-th smallest draw.

    Levels within 1e-9 above ``k / N`` are treated as ``k / N``, so a decimal
    level such as 0.995 picks the same order statistic whatever its binary
    rounding.
    """
    s = np.sort(np.asarray(draws, dtype=float).ravel())
    return float(s[_order_index(q, s.size)])


def expected_shortfall(draws, q: float) -> float:
    """Mean of the draws at or above ``VaR(q)``."""
    x = np.asarray(draws, dtype=float).ravel()
    var = value_at_risk(x, q)
    # VaR plus mean excess: exact for ties and never below VaR in floating point
    return float(var + (x[x >= var] - var).mean())


def summarize_draws(draws, levels=DEFAULT_LEVELS, interval: float = 0.95) -> dict:
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < MIN_SUMMARY_DRAWS:
        raise ValueError(f"need at least {MIN_SUMMARY_DRAWS} draws, got {x.size}")
    tail = (1.0 - interval) / 2.0
    lo, hi = hpd_interval(x, interval)
    out = {"median": value_at_risk(x, 0.5), "mean": float(x.mean()),
           "lower": value_at_risk(x, tail), "upper": value_at_risk(x, 1.0 - tail),
           "hpd_lower": lo, "hpd_upper": hi}
    for q in levels:
        out[f"var_{q:g}"] = value_at_risk(x, q)
        out[f"es_{q:g}"] = expected_shortfall(x, q)
    return out


@dataclass
class ReserveSummary:
    """Long table of (aggregate, statistic, value) with the scale it was computed on."""

    table: pd.DataFrame
    scale: str
    levels: tuple = DEFAULT_LEVELS
    interval: float = 0.95
    meta: dict = field(default_factory=dict)

    def get(self, aggregate: str, statistic: str) -> float:
        t = self.table
        hit = t[(t["aggregate"] == aggregate) & (t["statistic"] == statistic)]
        if hit.empty:
            raise KeyError((aggregate, statistic))
        return float(hit["value"].iloc[0])

    def aggregates(self) -> list:
        return list(dict.fromkeys(self.table["aggregate"]))

    def wide(self) -> pd.DataFrame:
        return self.table.pivot(index="aggregate", columns="statistic", values="value").loc[self.aggregates()]

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.table.to_csv(path, index=False)
        write_meta(path, {"scale": self.scale, "levels": list(self.levels), "interval": self.interval,
                          "quantile_type": "inverse-CDF on sorted draws",
                          "es_estimator": "mean of draws >= VaR(q)", **self.meta})
        return path

    @classmethod
    def from_csv(cls, path) -> "ReserveSummary":
        path = Path(path)
        if not path.exists():
            raise InputError(f"no such file: {path}")
        table = pd.read_csv(path, dtype={"aggregate": str}, float_precision="round_trip")
        meta = read_meta(path)
        return cls(table=table, scale=meta.pop("scale", "original"), levels=tuple(meta.pop("levels", DEFAULT_LEVELS)),
                   interval=meta.pop("interval", 0.95), meta=meta)


def reserve_summary(draws, levels=DEFAULT_LEVELS, interval: float = 0.95) -> ReserveSummary:
    """Summaries of every aggregate in ``draws``.

    ``draws`` is a :class:`PredictiveDraws` or a mapping of aggregate name to
    a 1-D array of reserve draws.
    """
    if isinstance(draws, PredictiveDraws):
        named, scale, meta = draws.aggregates(), draws.scale, {}
    else:
        named, scale, meta = dict(draws), "original", {}
    rows = []
    for name, x in named.items():
        for stat, value in summarize_draws(x, levels, interval).items():
            rows.append((name, stat, value))
    table = pd.DataFrame(rows, columns=["aggregate", "statistic", "value"])
    return ReserveSummary(table=table, scale=scale, levels=tuple(levels), interval=interval, meta=meta)


def aggregate_draws_to_csv(named: dict, path, meta: dict | None = None) -> Path:
    """Raw reserve draws, one column per aggregate (input for histograms)."""
    path = Path(path)
    pd.DataFrame({k: np.asarray(v, float) for k, v in named.items()}).to_csv(path, index_label="draw")
    write_meta(path, meta or {})
    return path


def cells_to_csv(draws: PredictiveDraws, path) -> Path:
    """Long table ``(i, j, k, draw, value)`` of simulated cells, labels 1-based."""
    path = Path(path)
    m, i, j, k = np.nonzero(np.isfinite(draws.cells))
    pd.DataFrame({"i": i + 1, "j": j + 1, "k": k + 1, "draw": m + 1,
                  "value": draws.cells[m, i, j, k]}).to_csv(path, index=False)
    write_meta(path, {"scale": draws.scale, **draws.meta})
    return path


def write_meta(path, meta: dict) -> Path:
    path = Path(path)
    target = path.with_name(path.name + ".meta.json")
    target.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    return target


def read_meta(path) -> dict:
    target = Path(path).with_name(Path(path).name + ".meta.json")
    return json.loads(target.read_text()) if target.exists() else {}


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


# --- model selection ----------------------------------------------------------------

def dic_components(samples: PosteriorSamples, panel: TrianglePanel) -> dict:
    """``Dbar``, ``Dhat``, ``pD`` and ``DIC`` from the recorded deviances.

    The plug-in uses posterior means of alpha, beta and gamma and the
    per-cell posterior mean of the latent counts rounded to an integer.
    """
    _check_shapes(samples, panel)
    dev = np.asarray(samples.deviance, dtype=float)
    if dev.size == 0:
        raise ValueError("no deviance draws recorded")
    x, obs = model_arrays(panel)
    plug = samples.posterior_mean_params()
    d_hat = conditional_deviance(x, obs, plug.alpha, plug.beta, plug.gamma, plug.z, samples.spec.p)
    if not math.isfinite(d_hat):
        raise FloatingPointError("plug-in deviance is not finite")
    d_bar = float(dev.mean())
    return {"Dbar": d_bar, "Dhat": d_hat, "pD": d_bar - d_hat, "DIC": 2.0 * d_bar - d_hat}


def dic(samples: PosteriorSamples, panel: TrianglePanel) -> float:
    return dic_components(samples, panel)["DIC"]


@dataclass(frozen=True)
class LTerms:
    """Mean predictive variance and mean squared bias over the scored cells."""

    variance: float
    bias2: float
    M: int
    cells: str

    def __call__(self, nu: float) -> float:
        return self.variance + nu * self.bias2


def l_measure_terms(samples: PosteriorSamples, panel: TrianglePanel, cells: str = "out-of-sample",
                    rng: np.random.Generator | None = None, draws: PredictiveDraws | None = None) -> LTerms:
    """Variance and bias terms of the L-measure on the model scale.

    Out-of-sample scores the lower triangle against held-out truth with
    ``M = K n (n-1) / 2``; in-sample scores replicates of the observed cells
    with ``M = K n (n+1) / 2``.  Variances use the 1/N normaliser.
    """
    if cells not in ("in-sample", "out-of-sample"):
        raise InputError(f"cells must be 'in-sample' or 'out-of-sample', got {cells!r}")
    replicate = cells == "in-sample"
    _, obs = model_arrays(panel)
    mask = np.repeat((obs if replicate else ~obs)[:, :, None], panel.K, axis=2)
    truth = np.asarray(panel.cells)
    if not replicate and not np.all(np.isfinite(truth[mask])):
        raise InputError("out-of-sample L-measure needs held-out values for every lower-triangle cell")
    if draws is None:
        draws = predictive_draws(samples, panel, scale="transformed", rng=rng, replicate=replicate)
    elif draws.scale != "transformed" or not np.array_equal(draws.target, mask):
        raise InputError("supplied draws do not match the requested cells or scale")
    sim = draws.cells[:, mask]
    mean = sim.mean(axis=0)
    var = sim.var(axis=0)
    M = int(mask.sum())
    return LTerms(variance=float(var.sum() / M), bias2=float(((mean - truth[mask]) ** 2).sum() / M),
                  M=M, cells=cells)


def l_measure(samples: PosteriorSamples, panel: TrianglePanel, nu: float = 0.5, cells: str = "out-of-sample",
              rng: np.random.Generator | None = None) -> float:
    if not 0.0 <= nu <= 1.0:
        raise InputError(f"nu must lie in [0, 1], got {nu}")
    return l_measure_terms(samples, panel, cells, rng)(nu)


def prior_grid(ps=range(6), alpha_pairs=(1.0, 10.0), beta_pairs=(1.0, 10.0), gamma_pair: float = 10.0,
                transform=None) -> list:
    """The 24-model prior grid: blocks over (a_beta0, a_alpha0), ``p`` varying fastest."""
    grid = []
    for ab in beta_pairs:
        for aa in alpha_pairs:
            for p in ps:
                kw = dict(p=int(p), a_alpha0=aa, b_alpha0=aa, a_beta0=ab, b_beta0=ab,
                          a_gamma0=gamma_pair, b_gamma0=gamma_pair)
                if transform is not None:
                    kw["transform"] = transform
                grid.append(ModelSpec(**kw))
    return grid


GRID_COLUMNS = ("model_id", "p", "a_alpha0", "b_alpha0", "a_beta0", "b_beta0", "a_gamma0", "b_gamma0",
                "DIC", "pD", "L_in", "L_out", "status")


def score_fit(samples: PosteriorSamples, panel: TrianglePanel, nu: float = 0.5) -> dict:
    seed = int(samples.run.seed)
    out = dic_components(samples, panel)
    out["L_in"] = l_measure(samples, panel, nu, "in-sample", rng=np.random.default_rng([seed, 2]))
    if panel.has_truth:
        out["L_out"] = l_measure(samples, panel, nu, "out-of-sample", rng=np.random.default_rng([seed, 3]))
    else:
        out["L_out"] = float("nan")
    return out


def model_grid_run(panel: TrianglePanel, grid, run: RunConfig, nu: float = 0.5, progress=None) -> pd.DataFrame:
    """Fit and score every spec in ``grid``; rows are ranked by DIC.

    A model whose fit or scoring fails gets a row with NaN scores and the
    error message in ``status``; the remaining models still run.
    """
    grid = list(grid)
    if not grid:
        raise InputError("model grid is empty")
    rows = []
    for m, spec in enumerate(grid, 1):
        row = {"model_id": m, "p": spec.p, **{k: getattr(spec, k) for k in GRID_COLUMNS[2:8]}}
        try:
            samples = run_chains(panel, spec, run)
            scores = score_fit(samples, panel, nu)
            row.update(DIC=scores["DIC"], pD=scores["pD"], L_in=scores["L_in"], L_out=scores["L_out"], status="ok")
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            row.update(DIC=np.nan, pD=np.nan, L_in=np.nan, L_out=np.nan, status=f"error: {exc}")
        rows.append(row)
        if progress is not None:
            progress(m, len(grid), row)
    table = pd.DataFrame(rows, columns=list(GRID_COLUMNS))
    table["rank_dic"] = table["DIC"].rank(method="min")
    return table.sort_values(["DIC", "model_id"], na_position="last", kind="stable").reset_index(drop=True)


def true_reserves(panel: TrianglePanel, scale: str = "original") -> dict:
    """Held-out reserves keyed like :meth:`PredictiveDraws.aggregates`."""
    if not panel.has_truth:
        raise InputError("panel carries no held-out lower triangle")
    cells = panel.original_cells() if scale == "original" else np.asarray(panel.cells)
    future = ~calibration_mask(panel.n, panel.K)
    R_ik = np.where(future, cells, 0.0).sum(axis=1)
    R_k = R_ik.sum(axis=0)
    out = {"total": float(R_k.sum())}
    for k, b in enumerate(panel.business_ids):
        out[f"business/{b}"] = float(R_k[k])
    for k, b in enumerate(panel.business_ids):
        for i, label in enumerate(panel.origin_labels):
            if future[i, :, k].any():
                out[f"origin/{b}/{label}"] = float(R_ik[i, k])
    return out
