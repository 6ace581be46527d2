"""Small numerical kernels: tail quadrature and safeguarded root finding."""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import BracketFailure, DivergentIntegral, NodeSolveFailure

QUAD_ATOL = 1e-10
QUAD_RTOL = 1e-8


def _quad(fun, lo, hi, atol, rtol, where):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(fun, lo, hi, epsabs=atol * 1e-2, epsrel=rtol * 1e-2,
                                      limit=400)
        except (ZeroDivisionError, OverflowError) as exc:
            raise DivergentIntegral(f"integral {where} did not converge: {exc}") from exc
    # roundoff warnings at tight tolerances are harmless when the error estimate is small
    if not np.isfinite(val) or (caught and err > max(atol, rtol * abs(val)) * 100):
        raise DivergentIntegral(f"integral {where} did not converge (err={err:.3g})")
    return float(val)


def tail_integral(g: Callable[[float], float], x: float,
                  atol: float = QUAD_ATOL, rtol: float = QUAD_RTOL) -> float:
    """Integral of g over [x, inf) after the map t = x + u/(1-u)."""

    def mapped(u):
        w = 1.0 - u
        t = x + u / w
        if not np.isfinite(t):
            return 0.0
        return g(t) / (w * w)

    return _quad(mapped, 0.0, 1.0, atol, rtol, f"from {x} to inf")


def log_tail_integral(g: Callable[[float], float], base: float, start: float,
                      atol: float = QUAD_ATOL, rtol: float = QUAD_RTOL) -> float:
    """Integral of g over [start, inf) using t = base + (start - base) * exp(v).

    Useful when g has a pole at ``base`` just left of ``start``.
    """
    width = start - base

    def in_v(v):
        with np.errstate(over="ignore"):
            t = base + width * np.exp(v)
        if not np.isfinite(t):
            return 0.0
        return g(t) * (t - base)

    return _quad(in_v, 0.0, np.inf, atol, rtol, f"from {start} to inf")


def newton_bracketed(fun: Callable[[float], float], dfun: Callable[[float], float],
                     lo: float, hi: float, xtol: float = 1e-14, rtol: float = 1e-13,
                     maxiter: int = 200) -> float:
    """Root of a monotone scalar function inside [lo, hi].

    Newton steps are accepted only when they stay inside the current
    bracket; otherwise the step is a bisection.
    """
    flo, fhi = fun(lo), fun(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BracketFailure(f"no sign change on [{lo}, {hi}]")
    increasing = fhi > 0
    x = 0.5 * (lo + hi)
    for _ in range(maxiter):
        fx = fun(x)
        if fx == 0.0:
            return x
        if (fx > 0) == increasing:
            hi = x
        else:
            lo = x
        d = dfun(x)
        step_ok = False
        if d != 0 and np.isfinite(d):
            cand = x - fx / d
            if lo < cand < hi:
                step_ok = True
        if not step_ok:
            cand = 0.5 * (lo + hi)
        if abs(cand - x) <= xtol + rtol * abs(cand) or hi - lo <= xtol + rtol * abs(x):
            return cand
        x = cand
    return x


def expand_bracket(fun: Callable[[float], float], lo: float, hi: float,
                   target_sign_lo: float, lo_min: float = 0.0,
                   hi_max: float = 1e300, factor: float = 2.0, maxiter: int = 2000):
    """Grow [lo, hi] geometrically until fun(lo) has ``target_sign_lo`` and
    fun(hi) the opposite sign. ``lo`` shrinks toward ``lo_min``."""
    for _ in range(maxiter):
        if np.sign(fun(lo)) == target_sign_lo:
            break
        lo = lo_min + (lo - lo_min) / factor
    else:
        raise BracketFailure("lower end of bracket not found")
    for _ in range(maxiter):
        if np.sign(fun(hi)) == -target_sign_lo:
            return lo, hi
        hi *= factor
        if hi > hi_max:
            break
    raise BracketFailure("upper end of bracket not found")


def solve_increasing(g: Callable[[np.ndarray], np.ndarray],
                     dg: Callable[[np.ndarray], np.ndarray],
                     lo: np.ndarray, hi: np.ndarray, x0: np.ndarray | None = None,
                     tol: float = 1e-13, maxiter: int = 200, context: str = "") -> np.ndarray:
    """Vectorized safeguarded Newton for g(x) = 0 with g increasing.

    Requires g(lo) <= 0 <= g(hi) elementwise.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x = np.clip(hi if x0 is None else np.array(x0, dtype=float), lo, hi)
    done = np.zeros(x.shape, dtype=bool)
    for _ in range(maxiter):
        gx = g(x)
        zero = gx == 0
        hi = np.where(gx > 0, x, hi)
        lo = np.where(gx < 0, x, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = x - gx / dg(x)
        bad = ~np.isfinite(cand) | (cand <= lo) | (cand >= hi)
        cand = np.where(bad, 0.5 * (lo + hi), cand)
        cand = np.where(zero | done, x, cand)
        scale = 1.0 + np.abs(cand)
        done = done | zero | (np.abs(cand - x) <= tol * scale) | (hi - lo <= tol * scale)
        x = cand
        if done.all():
            return x
    raise NodeSolveFailure(f"node solve did not converge {context}".strip())
