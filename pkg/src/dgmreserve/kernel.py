"""Univariate sampling primitives and chain summaries.

The slice and discrete samplers are written once and built per target: plain
Python for ordinary callables, ``numba``-compiled for jitted log densities.
The Gibbs sampler builds one compiled sampler per full conditional.  Log
densities are called as ``logpdf(x, args)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numba as nb
import numpy as np
from numba.core.registry import CPUDispatcher

OK = 0
BAD_START = 1
STEP_OUT_LIMIT = 2
ENUMERATION_LIMIT = 3

MAX_STEP_OUT = 1000
MAX_STATES = 1_000_000
# math.exp raises above this in plain Python; numba returns inf
EXP_MAX = 709.0


@dataclass(frozen=True)
class LogDensity1D:
    """Unnormalised log density on ``"positive"`` reals or ``"nonnegative-integer"``."""

    logpdf: Callable
    support: str = "positive"


def _build_slice(logpdf, jit: bool):
    """Slice sampler specialised to one log density.

    The density is bound by closure rather than passed as an argument: numba
    refuses to cache callers of a core that takes a jitted function as a
    first-class value, and recompiling the Gibbs sweep each process is slow.
    """

    def core(args, x0, width, rng):
        # stepping out and shrinkage on u = log(x); target of u is logpdf(e^u) + u
        u0 = math.log(x0)
        g0 = logpdf(x0, args) + u0
        if not -math.inf < g0 < math.inf:
            return x0, BAD_START
        level = g0 - rng.exponential()
        left = u0 - width * rng.random()
        right = left + width
        # endpoints whose exp under/overflows count as outside the slice
        steps = 0
        while True:
            x = math.exp(left)
            if x == 0.0 or not logpdf(x, args) + left > level:
                break
            left -= width
            steps += 1
            if steps > MAX_STEP_OUT:
                return x0, STEP_OUT_LIMIT
        steps = 0
        while True:
            x = math.exp(right) if right < EXP_MAX else math.inf
            if x == math.inf or not logpdf(x, args) + right > level:
                break
            right += width
            steps += 1
            if steps > MAX_STEP_OUT:
                return x0, STEP_OUT_LIMIT
        for _ in range(10_000):
            u = left + (right - left) * rng.random()
            x = math.exp(u) if u < EXP_MAX else math.inf
            if 0.0 < x < math.inf and logpdf(x, args) + u > level:
                return x, OK
            if u < u0:
                left = u
            else:
                right = u
        return x0, OK

    return nb.njit(nogil=True, cache=True)(core) if jit else core


def _build_discrete(logw, jit: bool):
    """Enumeration sampler specialised to one log pmf (closure for the same reason)."""

    def core(args, rng, tail_tol):
        buf = np.empty(64)
        total = -math.inf
        peak = -math.inf
        log_tol = math.log(tail_tol)
        m = 0
        while True:
            if m >= MAX_STATES:
                return -1, ENUMERATION_LIMIT
            w = logw(m, args)
            if m == buf.size:
                grown = np.empty(2 * buf.size)
                grown[:m] = buf
                buf = grown
            buf[m] = w
            if total == -math.inf:
                total = w
            elif w > total:
                total = w + math.log1p(math.exp(total - w))
            elif w > -math.inf:
                total = total + math.log1p(math.exp(w - total))
            m += 1
            if w > peak:
                peak = w
            elif w < peak and w - total < log_tol:
                break
        if total == -math.inf:
            return -1, BAD_START
        u = rng.random()
        c = 0.0
        for t in range(m):
            c += math.exp(buf[t] - total)
            if u < c:
                return t, OK
        return m - 1, OK

    return nb.njit(nogil=True, cache=True)(core) if jit else core


def make_slice_sampler(logpdf):
    """Compiled ``sampler(args, x0, width, rng) -> (x, status)`` for a jitted ``logpdf``."""
    return _build_slice(logpdf, jit=True)


def make_discrete_sampler(logw):
    """Compiled ``sampler(args, rng, tail_tol) -> (value, status)`` for a jitted ``logw``."""
    return _build_discrete(logw, jit=True)


_compiled = {}


def _sampler(kind, fn):
    if not isinstance(fn, CPUDispatcher):
        return (_build_slice if kind == "slice" else _build_discrete)(fn, jit=False)
    key = (kind, fn)
    if key not in _compiled:
        _compiled[key] = (make_slice_sampler if kind == "slice" else make_discrete_sampler)(fn)
    return _compiled[key]


def _unwrap(target):
    return target.logpdf if isinstance(target, LogDensity1D) else target


def slice_sample(target, current: float, width: float, rng: np.random.Generator, args=()) -> float:
    """One slice-sampling update of a positive scalar.

    Works on ``log(current)`` with the log-Jacobian added, so no proposal can
    leave the positive half-line.  ``target`` is a :class:`LogDensity1D` or a
    callable ``logpdf(x, args)``; jitted callables run the compiled kernel.
    """
    if not width > 0:
        raise ValueError(f"slice width must be positive, got {width}")
    if not current > 0:
        raise ValueError(f"current point must be positive, got {current}")
    x, status = _sampler("slice", _unwrap(target))(args, float(current), float(width), rng)
    if status == BAD_START:
        raise ValueError(f"log density is not finite at current point {current}")
    if status == STEP_OUT_LIMIT:
        raise RuntimeError(f"stepping out exceeded {MAX_STEP_OUT} steps; density looks improper")
    return x


def discrete_sample(target, rng: np.random.Generator, tail_tol: float = 1e-12, args=()) -> int:
    """Exact draw from an unnormalised pmf on ``0, 1, 2, ...`` by enumeration.

    Log weights are accumulated with a running log-sum-exp until, past the
    mode, a new term contributes less than ``tail_tol`` of the mass so far.
    """
    value, status = _sampler("discrete", _unwrap(target))(args, rng, float(tail_tol))
    if status == ENUMERATION_LIMIT:
        raise RuntimeError(f"enumeration exceeded {MAX_STATES} states")
    if status == BAD_START:
        raise ValueError("target has no mass on the enumerated support")
    return int(value)


def hpd_interval(samples, level: float = 0.9) -> tuple[float, float]:
    """Shortest window of sorted samples holding ``ceil(level * N)`` points.

    Ties go to the window with the smallest start.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    N = s.size
    if N == 0:
        raise ValueError("hpd_interval needs at least one sample")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    m = min(N, max(1, math.ceil(level * N - 1e-9)))
    widths = s[m - 1:] - s[: N - m + 1]
    t = int(np.argmin(widths))
    return float(s[t]), float(s[t + m - 1])


def psrf(chains) -> float:
    """Potential scale reduction factor; NaN when fewer than two chains are given."""
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        return float("nan")
    m, n = arr.shape
    if n < 2:
        raise ValueError("psrf needs at least two draws per chain")
    means = arr.mean(axis=1)
    W = arr.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_hat = (n - 1) / n * W + B / n
    return float(math.sqrt(var_hat / W))


def batch_means_se(x, batches: int = 50) -> float:
    """Monte Carlo standard error of the mean of an autocorrelated series."""
    x = np.asarray(x, dtype=float).ravel()
    size = x.size // batches
    if size < 2:
        return float(x.std(ddof=1) / math.sqrt(x.size))
    b = x[: size * batches].reshape(batches, size).mean(axis=1)
    return float(b.std(ddof=1) / math.sqrt(batches))


@dataclass
class ChainSummary:
    mean: float
    median: float
    sd: float
    hpd: tuple
    psrf: float


def summarize_chains(chains, level: float = 0.9) -> ChainSummary:
    """Summary of one scalar parameter given as an array of shape (chains, draws)."""
    arr = np.atleast_2d(np.asarray(chains, dtype=float))
    flat = arr.ravel()
    lo, hi = hpd_interval(flat, level)
    return ChainSummary(mean=float(flat.mean()), median=float(np.median(flat)),
                        sd=float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
                        hpd=(lo, hi, level), psrf=psrf(arr))
