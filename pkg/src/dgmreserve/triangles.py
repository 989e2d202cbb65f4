"""Run-off triangle panels, CSV ingestion, value transforms and run configuration.

A panel holds ``K`` incremental run-off triangles of the same depth ``n`` as a
dense ``(n, n, K)`` array.  Array index ``[i, j, k]`` is origin year ``i + 1``,
development year ``j + 1`` of business ``k``; the calibration data are the
cells with ``i + j <= n - 1``.  Cells in the lower triangle may be present as
held-out truth, in which case they are stored with ``observed_mask`` false.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

CANONICAL_COLUMNS = ("business_id", "origin_year", "dev_year", "value")

# NAIC Schedule P column names (used by the CAS loss reserve database extracts)
NAIC_SCHEMA = {
    "business_id": "GRCODE",
    "origin_year": "AccidentYear",
    "dev_year": "DevelopmentLag",
    "value": "IncrLoss",
}


class InputError(ValueError):
    """Malformed input data or configuration."""


@dataclass(frozen=True)
class TransformSpec:
    """Power transform ``x -> (x / divisor) ** power`` applied at ingestion."""

    divisor: float = 1000.0
    power: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not self.divisor > 0:
            raise InputError(f"transform divisor must be positive, got {self.divisor}")
        if not 0 < self.power <= 1:
            raise InputError(f"transform power must lie in (0, 1], got {self.power}")

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls(divisor=1.0, power=1.0, enabled=False)

    def forward(self, x):
        if not self.enabled:
            return x
        return (np.asarray(x, dtype=float) / self.divisor) ** self.power

    def inverse(self, y):
        if not self.enabled:
            return y
        return np.asarray(y, dtype=float) ** (1.0 / self.power) * self.divisor


@dataclass(frozen=True)
class ModelSpec:
    """Dependence order and hyperprior constants of the hierarchical prior."""

    p: int = 1
    a_alpha0: float = 1.0
    b_alpha0: float = 1.0
    a_beta0: float = 1.0
    b_beta0: float = 1.0
    a_gamma0: float = 10.0
    b_gamma0: float = 10.0
    transform: TransformSpec = field(default_factory=TransformSpec.identity)

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 0:
            raise InputError(f"dependence order p must be a nonnegative integer, got {self.p}")
        for name in ("a_alpha0", "b_alpha0", "a_beta0", "b_beta0", "a_gamma0", "b_gamma0"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise InputError(f"{name} must be a positive finite number, got {value}")

    @property
    def hyperprior(self) -> np.ndarray:
        """Constants in the order (a_alpha0, b_alpha0, a_beta0, b_beta0, a_gamma0, b_gamma0)."""
        return np.array([self.a_alpha0, self.b_alpha0, self.a_beta0,
                         self.b_beta0, self.a_gamma0, self.b_gamma0], dtype=float)

    def check_depth(self, n: int) -> None:
        if self.p >= n:
            raise InputError(f"dependence order p={self.p} must be smaller than triangle depth n={n}")


@dataclass(frozen=True)
class RunConfig:
    """MCMC run lengths and seeding.

    Each chain performs ``burn_in`` sweeps, then ``keep * thin`` sweeps of
    which every ``thin``-th is stored.
    """

    chains: int = 2
    burn_in: int = 1000
    keep: int = 1000
    thin: int = 1
    seed: int = 0
    slice_width: float = 1.0
    tail_tol: float = 1e-12
    threads: int | None = None

    def __post_init__(self):
        if self.chains < 1:
            raise InputError("chains must be >= 1")
        if self.burn_in < 0:
            raise InputError("burn_in must be >= 0")
        if self.keep < 1:
            raise InputError("keep must be >= 1")
        if self.thin < 1:
            raise InputError("thin must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise InputError("seed must be an unsigned 64-bit integer")
        if not self.slice_width > 0:
            raise InputError("slice_width must be positive")
        if not 0 < self.tail_tol < 1:
            raise InputError("tail_tol must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class TrianglePanel:
    """``K`` run-off triangles of incremental claims with an observed-cell mask.

    ``cells`` is NaN where no value is stored.  ``transform`` records the
    transform already applied to ``cells`` so original-scale values can be
    recovered with :meth:`original_cells`.
    """

    cells: np.ndarray
    observed_mask: np.ndarray
    business_ids: tuple = ()
    origin_labels: tuple = ()
    dev_labels: tuple = ()
    transform: TransformSpec = field(default_factory=TransformSpec.identity)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=float)
        mask = np.array(self.observed_mask, dtype=bool)
        if cells.ndim != 3 or cells.shape[0] != cells.shape[1]:
            raise InputError(f"cells must have shape (n, n, K), got {cells.shape}")
        if mask.shape != cells.shape:
            raise InputError("observed_mask must match cells in shape")
        obs = cells[mask]
        if not np.all(np.isfinite(obs)):
            raise InputError("observed cells must be finite")
        if np.any(obs < 0):
            raise InputError("observed cells must be nonnegative")
        cells.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "observed_mask", mask)
        n, _, K = cells.shape
        if not self.business_ids:
            object.__setattr__(self, "business_ids", tuple(str(k + 1) for k in range(K)))
        if not self.origin_labels:
            object.__setattr__(self, "origin_labels", tuple(range(1, n + 1)))
        if not self.dev_labels:
            object.__setattr__(self, "dev_labels", tuple(range(1, n + 1)))

    @property
    def n(self) -> int:
        return self.cells.shape[0]

    @property
    def K(self) -> int:
        return self.cells.shape[2]

    @property
    def held_out_mask(self) -> np.ndarray:
        """Cells stored but not used for calibration."""
        return np.isfinite(self.cells) & ~self.observed_mask

    @property
    def has_truth(self) -> bool:
        """True when every lower-triangle cell carries a held-out value."""
        return bool(np.all(self.held_out_mask[~calibration_mask(self.n, self.K)]))

    def is_calibration(self) -> bool:
        return bool(np.array_equal(self.observed_mask, calibration_mask(self.n, self.K)))

    def original_cells(self) -> np.ndarray:
        return np.asarray(self.transform.inverse(self.cells), dtype=float)

    def replace(self, **changes) -> "TrianglePanel":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, TrianglePanel):
            return NotImplemented
        return (np.array_equal(self.cells, other.cells, equal_nan=True)
                and np.array_equal(self.observed_mask, other.observed_mask)
                and self.business_ids == other.business_ids
                and self.origin_labels == other.origin_labels
                and self.dev_labels == other.dev_labels
                and self.transform == other.transform)


def calibration_mask(n: int, K: int = 1) -> np.ndarray:
    """Upper-triangle mask: True where ``i + j <= n - 1``."""
    i, j = np.indices((n, n))
    return np.repeat(((i + j) <= n - 1)[:, :, None], K, axis=2)


def _reindex(labels, what: str) -> dict:
    values = sorted(set(labels))
    if values != list(range(values[0], values[0] + len(values))):
        raise InputError(f"{what} labels are not contiguous integers: {values}")
    return {v: idx for idx, v in enumerate(values)}


def load_panel(path, schema: dict | None = None) -> TrianglePanel:
    """Read a long-format CSV of incremental claims into a panel.

    Parameters
    ----------
    path : path-like
        Comma-delimited UTF-8 file with a header row.
    schema : dict, optional
        Maps canonical column names (``business_id``, ``origin_year``,
        ``dev_year``, ``value``) to the names used in the file.

    Rows in the upper triangle are calibration data and all must be present;
    lower-triangle rows are kept as held-out truth.  Extra columns are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    names = {c: c for c in CANONICAL_COLUMNS}
    if schema:
        unknown = set(schema) - set(CANONICAL_COLUMNS)
        if unknown:
            raise InputError(f"unknown schema keys: {sorted(unknown)}")
        names.update(schema)
    df = pd.read_csv(path, dtype=str, encoding="utf-8", skipinitialspace=True)
    missing = [names[c] for c in CANONICAL_COLUMNS if names[c] not in df.columns]
    if missing:
        raise InputError(f"missing columns {missing} in {path}")
    df = df[[names[c] for c in CANONICAL_COLUMNS]].copy()
    df.columns = list(CANONICAL_COLUMNS)
    if df.empty:
        raise InputError(f"{path} contains no rows")
    df["business_id"] = df["business_id"].str.strip()
    for col in ("origin_year", "dev_year"):
        try:
            df[col] = df[col].astype(float)
        except ValueError as exc:
            raise InputError(f"unparseable {col}: {exc}") from None
        if np.any(df[col] != np.round(df[col])):
            raise InputError(f"{col} must hold integers")
        df[col] = df[col].astype(int)
    try:
        df["value"] = df["value"].astype(float)
    except ValueError as exc:
        raise InputError(f"unparseable numeric value: {exc}") from None
    if not np.all(np.isfinite(df["value"])):
        raise InputError("non-finite value in input")
    if np.any(df["value"] < 0):
        bad = df[df["value"] < 0].iloc[0]
        raise InputError(f"negative value {bad['value']} at business {bad['business_id']}, "
                         f"origin {bad['origin_year']}, dev {bad['dev_year']}")
    dup = df.duplicated(subset=["business_id", "origin_year", "dev_year"])
    if dup.any():
        row = df[dup].iloc[0]
        raise InputError(f"duplicate cell: business {row['business_id']}, "
                         f"origin {row['origin_year']}, dev {row['dev_year']}")

    origin_index = _reindex(df["origin_year"], "origin_year")
    dev_index = _reindex(df["dev_year"], "dev_year")
    n = len(origin_index)
    if len(dev_index) != n:
        raise InputError(f"{n} origin years but {len(dev_index)} development years")
    business_ids = tuple(dict.fromkeys(df["business_id"]))  # first-appearance order
    for b, group in df.groupby("business_id", sort=False):
        if set(group["origin_year"]) != set(origin_index) or set(group["dev_year"]) != set(dev_index):
            raise InputError(f"ragged businesses: business {b} does not span the same years")
    K = len(business_ids)
    k_index = {b: k for k, b in enumerate(business_ids)}

    cells = np.full((n, n, K), np.nan)
    i = df["origin_year"].map(origin_index).to_numpy()
    j = df["dev_year"].map(dev_index).to_numpy()
    k = df["business_id"].map(k_index).to_numpy()
    cells[i, j, k] = df["value"].to_numpy()
    upper = calibration_mask(n, K)
    holes = upper & np.isnan(cells)
    if holes.any():
        hi, hj, hk = np.argwhere(holes)[0]
        raise InputError(f"missing upper-triangle cell: business {business_ids[hk]}, "
                         f"origin {sorted(origin_index)[hi]}, dev {sorted(dev_index)[hj]}")
    return TrianglePanel(cells=cells, observed_mask=upper, business_ids=business_ids,
                         origin_labels=tuple(sorted(origin_index)),
                         dev_labels=tuple(sorted(dev_index)))


def write_panel(panel: TrianglePanel, path, original_scale: bool = True, extra=None) -> None:
    """Write every stored cell of ``panel`` in the long CSV format.

    ``extra`` maps column names to ``(n, n, K)`` arrays written alongside.
    """
    values = panel.original_cells() if original_scale else np.asarray(panel.cells)
    rows = []
    n, _, K = values.shape
    for k in range(K):
        for i in range(n):
            for j in range(n):
                if not np.isfinite(values[i, j, k]):
                    continue
                row = {"business_id": panel.business_ids[k], "origin_year": panel.origin_labels[i],
                       "dev_year": panel.dev_labels[j], "value": repr(float(values[i, j, k])),
                       "observed": int(panel.observed_mask[i, j, k])}
                for name, arr in (extra or {}).items():
                    row[name] = arr[i, j, k]
                rows.append(row)
    df = pd.DataFrame(rows)
    df.to_csv(path, index=False)


def apply_transform(panel: TrianglePanel, t: TransformSpec) -> TrianglePanel:
    """Return a panel with every stored value mapped through ``t``.

    The mask is unchanged.  Transforms compose only from the raw scale, so
    ``panel`` must not already carry an enabled transform.
    """
    if not t.enabled:
        return panel
    if panel.transform.enabled:
        raise InputError("panel is already transformed")
    cells = np.asarray(panel.cells)
    if np.any(cells[np.isfinite(cells)] < 0):
        raise InputError("negative value encountered in transform")
    return panel.replace(cells=t.forward(cells), transform=t)


def invert_transform(value, t: TransformSpec):
    """Map a transformed-scale value (scalar or array) back to the money scale."""
    if np.any(np.asarray(value) < 0):
        raise InputError("invert_transform expects nonnegative values")
    out = t.inverse(value)
    return float(out) if np.ndim(out) == 0 else out


def floor_zeros(panel: TrianglePanel, floor: float = 1e-6) -> TrianglePanel:
    """Replace observed zeros by ``floor`` (model scale) with a warning.

    The gamma likelihood is degenerate at zero, so the sampler needs strictly
    positive observations.
    """
    cells = np.array(panel.cells)
    zeros = panel.observed_mask & (cells <= 0)
    if not zeros.any():
        return panel
    warnings.warn(f"{int(zeros.sum())} observed zero cell(s) replaced by {floor:g}", stacklevel=2)
    cells[zeros] = floor
    return panel.replace(cells=cells)


# --- flat key = value config files -------------------------------------------------

_MODEL_KEYS = ("p", "a_alpha0", "b_alpha0", "a_beta0", "b_beta0", "a_gamma0", "b_gamma0")
_RUN_KEYS = ("chains", "burn_in", "keep", "thin", "seed", "slice_width", "tail_tol", "threads")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _as_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InputError(f"not a boolean: {value!r}")


def _number(key, value, kind=float):
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise InputError(f"{key}: not a number: {value!r}") from None
    if kind is int:
        if x != int(x):
            raise InputError(f"{key}: expected an integer, got {value!r}")
        return int(x)
    return x


def transform_from_config(cfg: dict) -> TransformSpec:
    enabled = _as_bool(cfg.get("transform", "false"))
    if not enabled:
        return TransformSpec.identity()
    return TransformSpec(divisor=_number("divisor", cfg.get("divisor", 1000.0)),
                         power=_number("power", cfg.get("power", 0.5)), enabled=True)


def model_spec_from_config(cfg: dict) -> ModelSpec:
    kwargs = {}
    for key in _MODEL_KEYS:
        if key in cfg:
            kwargs[key] = _number(key, cfg[key], int if key == "p" else float)
    return ModelSpec(transform=transform_from_config(cfg), **kwargs)


def run_config_from_config(cfg: dict) -> RunConfig:
    kwargs = {}
    for key in _RUN_KEYS:
        if key in cfg and cfg[key] not in (None, ""):
            kind = float if key in ("slice_width", "tail_tol") else int
            kwargs[key] = _number(key, cfg[key], kind)
    return RunConfig(**kwargs)


def schema_from_config(cfg: dict) -> dict | None:
    if cfg.get("schema", "").lower() == "naic":
        return dict(NAIC_SCHEMA)
    schema = {c: cfg[f"col_{c}"] for c in CANONICAL_COLUMNS if f"col_{c}" in cfg}
    return schema or None
