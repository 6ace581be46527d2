"""Monotone drivers f and their blow-up profiles.

A driver f is non-increasing on [0, inf) and satisfies f(0) = 0 (the Normal
kind is the one catalog exception, see ``DriverSpec.normal``). From f we build

* G(x) = int_x^inf dt / (-f(t)), decreasing from +inf to 0,
* phi = G^{-1}, the blow-up profile, with phi' = f(phi),
* vartheta, the profile of the shifted ODE theta' = lam + f(theta)/eta_cap,
  which bounds the singular solution from above.

Closed forms are used where they exist; ``Custom`` drivers go through
quadrature and bracketed Newton iterations.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from ._numerics import expand_bracket, log_tail_integral, newton_bracketed, tail_integral
from .errors import (ConfigError, DivergentIntegral, DomainError, MissingDerivative,
                     UnreachableLevel)

KINDS = ("power", "exponential", "normal", "logpower", "custom")


@dataclass(frozen=True)
class DriverSpec:
    """A monotone driver f together with its first two derivatives."""

    kind: str
    q: Optional[float] = None
    a: Optional[float] = None
    f_custom: Optional[Callable] = field(default=None, compare=False, repr=False)
    df_custom: Optional[Callable] = field(default=None, compare=False, repr=False)
    d2f_custom: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown driver kind {self.kind!r}")
        if self.kind in ("power", "logpower"):
            if self.q is None or not self.q > 0:
                raise ConfigError(f"{self.kind} driver needs q > 0")
            if self.kind == "logpower" and not self.q > 1:
                raise ConfigError("logpower driver needs q > 1")
        if self.kind in ("exponential", "normal") and (self.a is None or not self.a > 0):
            raise ConfigError(f"{self.kind} driver needs a > 0")
        if self.kind == "custom" and (self.f_custom is None or self.df_custom is None):
            raise ConfigError("custom driver needs f and f'")

    # constructors

    @classmethod
    def power(cls, q: float) -> "DriverSpec":
        """f(y) = -y |y|^q."""
        return cls("power", q=float(q))

    @classmethod
    def exponential(cls, a: float) -> "DriverSpec":
        """f(y) = -(exp(a y) - 1)."""
        return cls("exponential", a=float(a))

    @classmethod
    def normal(cls, a: float) -> "DriverSpec":
        """f(y) = -exp(a y^2) on y >= 0, extended by the constant -1 below 0.

        Here f(0) = -1, so G(0) = sqrt(pi/a)/2 is finite and phi reaches 0
        at that point; beyond it phi continues linearly with slope -1.
        """
        return cls("normal", a=float(a))

    @classmethod
    def logpower(cls, q: float) -> "DriverSpec":
        """f(y) = -(y + 1) log(y + 1)^q on y >= 0, zero below."""
        return cls("logpower", q=float(q))

    @classmethod
    def custom(cls, f: Callable, df: Callable, d2f: Callable | None = None) -> "DriverSpec":
        return cls("custom", f_custom=f, df_custom=df, d2f_custom=d2f)

    @property
    def closed_form(self) -> bool:
        return self.kind != "custom"

    @property
    def has_second_derivative(self) -> bool:
        return self.kind != "custom" or self.d2f_custom is not None

    # serialization

    def to_dict(self) -> dict:
        if self.kind == "custom":
            raise ConfigError("custom drivers hold callables and cannot be serialized")
        out = {"kind": self.kind}
        if self.q is not None:
            out["q"] = self.q
        if self.a is not None:
            out["a"] = self.a
        return out

    @classmethod
    def from_dict(cls, block: dict) -> "DriverSpec":
        block = dict(block)
        kind = str(block.pop("kind", "")).lower()
        allowed = {"q", "a"}
        extra = set(block) - allowed
        if extra:
            raise ConfigError(f"unknown driver fields {sorted(extra)}")
        try:
            return cls(kind, **{k: float(v) for k, v in block.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # the driver and its derivatives, vectorized

    def f(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == "power":
                return -y * np.abs(y) ** self.q
            if self.kind == "exponential":
                return -np.expm1(self.a * y)
            if self.kind == "normal":
                return np.where(y >= 0, -np.exp(self.a * y * y), -1.0)
            if self.kind == "logpower":
                yp = np.maximum(y, 0.0)
                return np.where(y > 0, -(1 + yp) * np.log1p(yp) ** self.q, 0.0)
        return np.asarray(self.f_custom(y), dtype=float)

    def df(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == "power":
                return -(self.q + 1) * np.abs(y) ** self.q
            if self.kind == "exponential":
                return -self.a * np.exp(self.a * y)
            if self.kind == "normal":
                return np.where(y >= 0, -2 * self.a * y * np.exp(self.a * y * y), 0.0)
            if self.kind == "logpower":
                L = np.log1p(np.maximum(y, 0.0))
                return np.where(y > 0, -(L ** self.q + self.q * L ** (self.q - 1)), 0.0)
        return np.asarray(self.df_custom(y), dtype=float)

    def d2f(self, y):
        y = np.asarray(y, dtype=float)
        q, a = self.q, self.a
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == "power":
                return -q * (q + 1) * np.abs(y) ** (q - 1) * np.sign(y)
            if self.kind == "exponential":
                return -a * a * np.exp(a * y)
            if self.kind == "normal":
                return np.where(y >= 0, -(2 * a + 4 * a * a * y * y) * np.exp(a * y * y), 0.0)
            if self.kind == "logpower":
                yp = np.maximum(y, 0.0)
                L = np.log1p(yp)
                val = -(q * L ** (q - 1) + q * (q - 1) * L ** (q - 2)) / (1 + yp)
                return np.where(y > 0, val, 0.0)
        if self.d2f_custom is None:
            raise MissingDerivative("custom driver has no second derivative")
        return np.asarray(self.d2f_custom(y), dtype=float)

    def log_neg_f(self, y):
        """log(-f(y)) for y > 0, computed without overflow."""
        y = np.asarray(y, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.kind == "power":
                return (1 + self.q) * np.log(np.abs(y))
            if self.kind == "exponential":
                ay = self.a * y
                return ay + np.log(-np.expm1(-ay))
            if self.kind == "normal":
                return np.where(y >= 0, self.a * y * y, 0.0)
            if self.kind == "logpower":
                return np.log1p(y) + self.q * np.log(np.log1p(y))
            return np.log(-self.f(y))

    def log_G(self, y):
        """log G(y) for y > 0, computed without underflow."""
        y = np.asarray(y, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            if self.kind == "power":
                return -math.log(self.q) - self.q * np.log(y)
            if self.kind == "exponential":
                u = np.exp(-self.a * y)
                ratio = np.where(u > 1e-300, -np.log1p(-u) / np.where(u > 1e-300, u, 1.0), 1.0)
                return -self.a * y + np.log(ratio) - math.log(self.a)
            if self.kind == "normal":
                return 0.5 * math.log(math.pi / self.a) + special.log_ndtr(-y * math.sqrt(2 * self.a))
            if self.kind == "logpower":
                return (1 - self.q) * np.log(np.log1p(y)) - math.log(self.q - 1)
        return np.log(np.array([_G_quad(self, float(v)) for v in np.ravel(y)]).reshape(y.shape))


# G and phi


def _G_quad(spec: DriverSpec, x: float) -> float:
    return tail_integral(lambda t: 1.0 / -float(spec.f(t)), x)


def _G_closed(spec: DriverSpec, x: np.ndarray) -> np.ndarray:
    q, a = spec.q, spec.a
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if spec.kind == "power":
            return np.where(x > 0, x ** -q / q, np.inf)
        if spec.kind == "exponential":
            return np.where(x > 0, -np.log1p(-np.exp(-a * x)) / a, np.inf)
        if spec.kind == "normal":
            g0 = 0.5 * math.sqrt(math.pi / a)
            return np.where(x >= 0, math.sqrt(math.pi / a) * special.ndtr(-x * math.sqrt(2 * a)),
                            g0 - x)
        if spec.kind == "logpower":
            return np.where(x > 0, np.log1p(x) ** (1 - q) / (q - 1), np.inf)
    raise AssertionError(spec.kind)


def _phi_closed(spec: DriverSpec, x: np.ndarray) -> np.ndarray:
    q, a = spec.q, spec.a
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if spec.kind == "power":
            return (q * x) ** (-1.0 / q)
        if spec.kind == "exponential":
            return -np.log(-np.expm1(-a * x)) / a
        if spec.kind == "normal":
            g0 = 0.5 * math.sqrt(math.pi / a)
            p = np.minimum(x * math.sqrt(a / math.pi), 0.5)
            return np.where(x < g0, -special.ndtri(p) / math.sqrt(2 * a), g0 - x)
        if spec.kind == "logpower":
            return np.expm1(((q - 1) * x) ** (1.0 / (1 - q)))
    raise AssertionError(spec.kind)


def _check_positive(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError("argument must be positive")
    return arr


def _scalar_or_array(val: np.ndarray, like):
    return float(val) if np.ndim(like) == 0 else val


def eval_G(spec: DriverSpec, x):
    """G(x) = int_x^inf dt/(-f(t)) for x > 0 (scalar or array)."""
    arr = _check_positive(x)
    if spec.closed_form:
        out = _G_closed(spec, arr)
    else:
        out = np.array([_G_quad(spec, float(v)) for v in np.ravel(arr)]).reshape(arr.shape)
    return _scalar_or_array(out, x)


def _phi_root(spec: DriverSpec, x: float) -> float:
    def gap(y):
        return _G_quad(spec, y) - x

    def dgap(y):
        return 1.0 / float(spec.f(y))

    lo, hi = expand_bracket(gap, 1.0, 1.0, target_sign_lo=1.0, lo_min=0.0)
    if lo == hi:
        hi = 2.0 * lo
        lo, hi = expand_bracket(gap, lo, hi, target_sign_lo=1.0, lo_min=0.0)
    return newton_bracketed(gap, dgap, lo, hi, rtol=1e-12)


def eval_phi(spec: DriverSpec, x):
    """phi(x) = G^{-1}(x) for x > 0."""
    arr = _check_positive(x)
    if spec.closed_form:
        out = _phi_closed(spec, arr)
    else:
        out = np.array([_phi_root(spec, float(v)) for v in np.ravel(arr)]).reshape(arr.shape)
    return _scalar_or_array(out, x)


def _f_at_phi(spec: DriverSpec, x: np.ndarray, need_second: bool = True):
    """(f, f', f'') evaluated at phi(x), stable for the LogPower kind."""
    if spec.kind == "logpower":
        q = spec.q
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            w = ((q - 1) * x) ** (1.0 / (1 - q))
            f0 = -np.exp(w) * w ** q
            f1 = -(w ** q + q * w ** (q - 1))
            f2 = -(q * w ** (q - 1) + q * (q - 1) * w ** (q - 2)) * np.exp(-w)
        return f0, f1, f2
    y = np.asarray(eval_phi(spec, x), dtype=float)
    f0, f1 = spec.f(y), spec.df(y)
    f2 = spec.d2f(y) if need_second else np.full_like(y, np.nan)
    return f0, f1, f2


def eval_phi_derivs(spec: DriverSpec, x):
    """(phi', phi'', phi''') from the chain rule on phi' = f(phi)."""
    arr = _check_positive(x)
    f0, f1, f2 = _f_at_phi(spec, arr)
    with np.errstate(over="ignore", invalid="ignore"):
        d1 = f0
        d2 = f1 * f0
        d3 = f2 * f0 * f0 + f1 * d2
    if np.ndim(x) == 0:
        return float(d1), float(d2), float(d3)
    return d1, d2, d3


def kappa1(spec: DriverSpec, x):
    """-x phi''(x)/phi'(x) = -x f'(phi(x))."""
    arr = _check_positive(x)
    _, f1, _ = _f_at_phi(spec, arr, need_second=False)
    return _scalar_or_array(-arr * f1, x)


def kappa2(spec: DriverSpec, x):
    """-x phi'''(x)/phi''(x) = -x (f'' f / f' + f') at phi(x)."""
    arr = _check_positive(x)
    if spec.kind == "logpower":
        q = spec.q
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            w = ((q - 1) * arr) ** (1.0 / (1 - q))
            f1 = -(w ** q + q * w ** (q - 1))
            f2f0 = (q * w ** (q - 1) + q * (q - 1) * w ** (q - 2)) * w ** q
    else:
        f0, f1, f2 = _f_at_phi(spec, arr)
        with np.errstate(over="ignore", invalid="ignore"):
            f2f0 = f2 * f0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = -arr * (f2f0 / f1 + f1)
    return _scalar_or_array(out, x)


# upper envelope vartheta


def lower_level(spec: DriverSpec, eta_cap: float, lambda_norm: float) -> float:
    """Point y0 with f(y0) = -lambda_norm * eta_cap, or 0 when f(0) is already below it."""
    c = lambda_norm * eta_cap
    if c <= 0:
        return 0.0
    f0 = float(spec.f(0.0))
    if f0 <= -c:
        warnings.warn(UnreachableLevel(
            f"f(0) = {f0} is already below -|lambda| eta_cap = {-c}; "
            "the envelope starts at the endpoint y = 0"), stacklevel=2)
        return 0.0
    if spec.kind == "power":
        return c ** (1.0 / (1.0 + spec.q))

    def gap(y):
        return float(spec.f(y)) + c

    try:
        _, hi = expand_bracket(gap, 0.0, 1.0, target_sign_lo=1.0, lo_min=0.0)
    except Exception as exc:
        raise UnreachableLevel(f"f never reaches {-c}") from exc
    return newton_bracketed(gap, lambda y: float(spec.df(y)), 0.0, hi, rtol=1e-14)


def eval_G_tilde(spec: DriverSpec, eta_cap: float, lambda_norm: float, y: float) -> float:
    """eta_cap * int_y^inf dt / (-lambda_norm*eta_cap - f(t)) for y above the lower level."""
    c = lambda_norm * eta_cap
    if c == 0:
        return eta_cap * float(eval_G(spec, y))
    y0 = lower_level(spec, eta_cap, lambda_norm)
    if not y > y0:
        raise DomainError(f"G-tilde is defined on ({y0}, inf), got {y}")

    def integrand(t):
        return 1.0 / (-c - float(spec.f(t)))

    return eta_cap * log_tail_integral(integrand, y0, y)


def eval_vartheta(spec: DriverSpec, eta_star_upper: float, lambda_norm: float, x: float) -> float:
    """vartheta(x) = G-tilde^{-1}(x) by quadrature and bracketed Newton."""
    if not x > 0:
        raise DomainError("vartheta needs x > 0")
    if lambda_norm < 0:
        raise DomainError("lambda_norm must be nonnegative")
    eta = eta_star_upper
    if lambda_norm == 0:
        return float(eval_phi(spec, x / eta))
    c = lambda_norm * eta
    y0 = lower_level(spec, eta, lambda_norm)
    if y0 == 0.0 and float(spec.f(0.0)) < -c:
        top = eval_G_tilde_at_zero(spec, eta, lambda_norm)
        if x >= top:
            raise DomainError(f"vartheta is only defined on (0, {top})")

    def gap(y):
        return eval_G_tilde(spec, eta, lambda_norm, y) - x

    def dgap(y):
        return -eta / (-c - float(spec.f(y)))

    start = max(float(eval_phi(spec, x / eta)) if spec.closed_form else 1.0, y0 + 1.0)
    hi = start
    for _ in range(200):
        if gap(hi) < 0:
            break
        hi = y0 + 2.0 * (hi - y0)
    lo = y0 + 0.5 * (hi - y0)
    for _ in range(2000):
        if gap(lo) > 0:
            break
        lo = y0 + 0.5 * (lo - y0)
    return newton_bracketed(gap, dgap, lo, hi, rtol=1e-13)


def eval_G_tilde_at_zero(spec: DriverSpec, eta_cap: float, lambda_norm: float) -> float:
    c = lambda_norm * eta_cap
    return eta_cap * tail_integral(lambda t: 1.0 / (-c - float(spec.f(t))), 0.0)


def vartheta_curve(spec: DriverSpec, eta_cap: float, lambda_norm: float, xs) -> np.ndarray:
    """vartheta on an array of x > 0 by integrating the flow in G-coordinates.

    With u = G(vartheta), the envelope ODE becomes
    du/dx = 1/eta_cap + lambda/phi'(u) with u(0) = 0, which is smooth at
    the singularity. Requires closed-form G and phi.
    """
    xs = _check_positive(xs)
    if lambda_norm == 0:
        return np.asarray(eval_phi(spec, xs / eta_cap), dtype=float)
    if not spec.closed_form:
        return np.array([eval_vartheta(spec, eta_cap, lambda_norm, float(v)) for v in np.ravel(xs)]
                        ).reshape(xs.shape)
    flat = np.ravel(xs)
    order = np.argsort(flat)
    sorted_x = flat[order]
    u = flow_in_G(spec, np.zeros(1), sorted_x, eta_cap, lambda_norm)
    out = np.empty_like(flat)
    out[order] = _phi_closed(spec, u)
    return out.reshape(xs.shape)


def flow_in_G(spec: DriverSpec, u0: np.ndarray, offsets: np.ndarray, eta: float,
              lam: float) -> np.ndarray:
    """Integrate du/dx = 1/eta + lam/phi'(u) from u0 (scalar start) to the sorted offsets."""

    def rhs(_, u):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            slope = _f_at_phi(spec, np.maximum(u, 1e-300), need_second=False)[0]
            return 1.0 / eta + np.where(np.isfinite(slope), lam / slope, 0.0)

    sol = integrate.solve_ivp(rhs, (0.0, float(offsets[-1])), np.atleast_1d(u0).astype(float),
                              method="DOP853", t_eval=offsets, rtol=1e-13, atol=1e-15)
    if not sol.success:
        raise DomainError(f"envelope flow failed: {sol.message}")
    return sol.y[0]


# companions


@dataclass(frozen=True)
class CompanionTable:
    """G, phi, its derivatives and vartheta bundled for one (driver, eta_cap, lambda)."""

    spec: DriverSpec
    eta_cap: float
    lambda_norm: float = 0.0

    def G(self, x):
        return eval_G(self.spec, x)

    def phi(self, x):
        return eval_phi(self.spec, x)

    def phi_derivs(self, x):
        return eval_phi_derivs(self.spec, x)

    def vartheta(self, x):
        return vartheta_curve(self.spec, self.eta_cap, self.lambda_norm, x)

    def G_tilde(self, y: float) -> float:
        return eval_G_tilde(self.spec, self.eta_cap, self.lambda_norm, y)


def companions(spec: DriverSpec, eta_cap: float, lambda_norm: float = 0.0) -> CompanionTable:
    if not eta_cap > 0 or lambda_norm < 0:
        raise ConfigError("need eta_cap > 0 and lambda_norm >= 0")
    return CompanionTable(spec, float(eta_cap), float(lambda_norm))


# structural conditions


@dataclass(frozen=True)
class ProbeGrid:
    x_min: float = 1e-6
    x_max: float = 1.0
    n_x: int = 200
    y_min: float = 1.0
    y_max: float = 1e6
    n_y: int = 200
    growth: float = 1.05
    rhos: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    c5_shifts: tuple = (0.5, 1.0)

    def xs(self) -> np.ndarray:
        return np.geomspace(self.x_min, self.x_max, self.n_x)

    def ys(self) -> np.ndarray:
        return np.geomspace(self.y_min, self.y_max, self.n_y)


@dataclass
class ConditionReport:
    a3: bool
    c1: Optional[bool]
    c2: bool
    c2_delta: Optional[float]
    c3: Optional[bool]
    c4: bool
    c4_rho: Optional[float]
    c5: bool
    kappa1_bound: float
    kappa2_bound: Optional[float]
    notes: list = field(default_factory=list)
    driver: dict = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return bool(self.a3 and self.c1 and self.c2 and self.c3 and self.c4 and self.c5)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)


def _bounded_near_zero(values: np.ndarray, xs: np.ndarray, growth: float) -> tuple[bool, float]:
    """Does the sup over the whole grid exceed the sup away from the last decade by > growth?"""
    vals = np.where(np.isnan(values), np.inf, values)
    sup_all = float(np.max(vals))
    sup_far = float(np.max(vals[xs >= 10 * xs[0]]))
    if not np.isfinite(sup_all):
        return False, sup_all
    if sup_all <= 0:
        return True, sup_all
    return sup_all <= growth * max(sup_far, 0.0), sup_all


def _c1(spec: DriverSpec, probe: ProbeGrid) -> Optional[bool]:
    if not spec.has_second_derivative:
        return None
    ys = np.concatenate([np.linspace(0, 1, 101)[1:], probe.ys()])
    with np.errstate(over="ignore", invalid="ignore"):
        curv = spec.d2f(ys)
    return bool(np.all(curv[~np.isnan(curv)] <= 1e-12))


def _c4(spec: DriverSpec, probe: ProbeGrid) -> tuple[bool, Optional[float]]:
    ys = probe.ys()
    logy = np.log(ys)
    lnf, lnG = spec.log_neg_f(ys), spec.log_G(ys)
    far = ys <= probe.y_max / 10
    for rho in probe.rhos:
        ratio = logy - lnf - (1 - rho) * lnG
        if np.any(np.isnan(ratio)):
            continue
        if np.max(ratio) - np.max(ratio[far]) <= math.log(probe.growth):
            return True, rho
    return False, None


def c5_ratio(spec: DriverSpec, x: np.ndarray, r: float) -> np.ndarray:
    """-f(phi(x) + r) / -f(phi(x))."""
    if spec.kind == "logpower":
        q = spec.q
        with np.errstate(over="ignore", under="ignore"):
            w = ((q - 1) * x) ** (1.0 / (1 - q))
            e = r * np.exp(-w)
            return (1 + e) * ((w + np.log1p(e)) / w) ** q
    y = np.asarray(eval_phi(spec, x), dtype=float)
    with np.errstate(over="ignore"):
        return np.exp(spec.log_neg_f(y + r) - spec.log_neg_f(y))


def _c5(spec: DriverSpec, probe: ProbeGrid, xs: np.ndarray) -> bool:
    ok = True
    for r in probe.c5_shifts:
        vals = c5_ratio(spec, xs, r) * xs
        if not np.all(np.isfinite(vals)):
            return False
        logx = np.log(xs)
        pieces = 0.5 * (vals[1:] + vals[:-1]) * np.diff(logx)
        total = pieces.sum()
        far = pieces[xs[1:] > 10 * xs[0]].sum()
        ok &= bool(total <= probe.growth * far)
    return ok


def check_conditions(spec: DriverSpec, probe: ProbeGrid | None = None) -> ConditionReport:
    """Numerical evidence for A3 and C1 to C5 on a finite probe grid."""
    probe = probe or ProbeGrid()
    notes = ["boundedness is judged on a finite probe grid: numeric evidence, not proof"]
    try:
        a3 = bool(np.isfinite(eval_G(spec, 1.0)))
    except DivergentIntegral:
        a3 = False
    if not a3:
        notes.append("A3 fails: G diverges, no further checks")
        return ConditionReport(False, None, False, None, None, False, None, False,
                               math.inf, None, notes, _driver_block(spec))
    xs = probe.xs()
    g_zero = _G_at_zero(spec)
    if np.isfinite(g_zero):
        # phi reaches 0 at G(0); the conditions concern phi near x = 0 only
        xs = xs[xs < 0.999 * g_zero]
        notes.append(f"G(0) = {g_zero:.6g} is finite; x-probe truncated below it")
    c1 = _c1(spec, probe)
    k1 = np.asarray(kappa1(spec, xs), dtype=float)
    c2, k1_sup = _bounded_near_zero(k1, xs, probe.growth)
    delta = max(k1_sup - 1.0, 1e-6) if c2 else None
    if spec.has_second_derivative:
        k2 = np.asarray(kappa2(spec, xs), dtype=float)
        c3, k2_sup = _bounded_near_zero(k2, xs, probe.growth)
        c3 = bool(c3 and c1)
    else:
        c3, k2_sup = None, None
        notes.append("custom driver without f'': C1 and C3 not checked")
    c4, rho = _c4(spec, probe)
    c5 = _c5(spec, probe, xs)
    if not c2:
        notes.append("kappa1 = -x phi''/phi' keeps growing toward x = 0")
    return ConditionReport(a3, c1, bool(c2), delta, c3, bool(c4), rho, bool(c5),
                           float(k1_sup), None if k2_sup is None else float(k2_sup),
                           notes, _driver_block(spec))


def _G_at_zero(spec: DriverSpec) -> float:
    if float(spec.f(0.0)) == 0.0:
        return math.inf
    if spec.closed_form:
        return float(_G_closed(spec, np.array(0.0)))
    try:
        return _G_quad(spec, 0.0)
    except DivergentIntegral:
        return math.inf


def _driver_block(spec: DriverSpec) -> dict:
    try:
        return spec.to_dict()
    except ConfigError:
        return {"kind": "custom"}


def sampled_monotone(spec: DriverSpec, y_max: float = 1e3, n: int = 2001) -> bool:
    """Sampled check that f is non-increasing on [0, y_max]."""
    ys = np.linspace(0.0, y_max, n)
    with np.errstate(over="ignore", invalid="ignore"):
        vals = spec.f(ys)
    finite = np.isfinite(vals)
    return bool(np.all(np.diff(vals[finite]) <= 1e-12 * np.maximum(1, np.abs(vals[finite][1:]))))
