"""Least-squares regression for conditional expectations on the Markov state."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatch

FAMILIES = ("polynomial", "piecewise-linear")


@dataclass(frozen=True)
class BasisSpec:
    """Regression basis in the state gamma_t.

    ``degree`` applies to the polynomial family and ``knots`` to the
    piecewise-linear family. Both always contain the constant function.
    """

    family: str = "polynomial"
    degree: int = 3
    knots: int = 8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown basis family {self.family!r}")
        if self.degree < 0 or self.knots < 2:
            raise ConfigError("basis needs degree >= 0 and knots >= 2")

    @property
    def dimension(self) -> int:
        return self.degree + 1 if self.family == "polynomial" else self.knots

    def reduced(self, n_paths: int) -> "BasisSpec":
        """Largest basis of the same family with at most n_paths/10 columns."""
        cap = max(n_paths // 10, 1)
        if self.dimension <= cap:
            return self
        if self.family == "polynomial":
            return BasisSpec("polynomial", degree=cap - 1, knots=self.knots)
        if cap < 2:
            return BasisSpec("polynomial", degree=0)
        return BasisSpec("piecewise-linear", degree=self.degree, knots=cap)

    def to_dict(self) -> dict:
        return {"family": self.family, "degree": self.degree, "knots": self.knots}


def _design(states: np.ndarray, basis: BasisSpec, center: float, scale: float,
            knots: np.ndarray | None) -> np.ndarray:
    z = (states - center) / scale
    if basis.family == "polynomial":
        return np.vander(z, basis.degree + 1, increasing=True)
    # hat functions on the knots; they sum to one, so constants are reproduced
    cols = []
    for j, k in enumerate(knots):
        left = knots[j - 1] if j > 0 else None
        right = knots[j + 1] if j + 1 < len(knots) else None
        col = np.ones_like(z)
        if left is not None:
            col = np.where(z < k, np.clip((z - left) / (k - left), 0.0, 1.0), col)
        if right is not None:
            col = np.where(z >= k, np.clip((right - z) / (right - k), 0.0, 1.0), col)
        cols.append(col)
    return np.column_stack(cols)


@dataclass
class RegressionFit:
    """An evaluable least-squares fit plus diagnostics."""

    basis: BasisSpec
    coefficients: np.ndarray
    center: float
    scale: float
    knots: np.ndarray | None
    rank: int
    condition_number: float
    residual_variance: float
    n_samples: int
    flags: list = field(default_factory=list)
    # pieces of the thin SVD, kept for prediction standard errors
    _vt: np.ndarray | None = None
    _sinv: np.ndarray | None = None

    @property
    def constant(self) -> bool:
        return self._vt is None

    def predict(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if self.constant:
            return np.full(states.shape, self.coefficients[0])
        return _design(states, self.basis, self.center, self.scale, self.knots) @ self.coefficients

    def prediction_se(self, states) -> np.ndarray:
        """Standard error of the fitted conditional mean at each state."""
        states = np.asarray(states, dtype=float)
        if self.constant:
            return np.full(states.shape, np.sqrt(self.residual_variance / max(self.n_samples, 1)))
        X = _design(states, self.basis, self.center, self.scale, self.knots)
        lev = np.sum((X @ self._vt.T * self._sinv) ** 2, axis=1)
        return np.sqrt(self.residual_variance * lev)

    def diagnostics(self) -> dict:
        return {"basis": self.basis.to_dict(), "rank": self.rank,
                "condition_number": self.condition_number,
                "residual_variance": self.residual_variance, "flags": list(self.flags)}

    def to_json(self) -> str:
        return json.dumps(self.diagnostics())


def _degenerate(states: np.ndarray) -> bool:
    spread = np.ptp(states) if states.size else 0.0
    return spread <= 1e-12 * max(1.0, float(np.max(np.abs(states))) if states.size else 1.0)


def fit_conditional(targets, states, basis: BasisSpec | None = None,
                    rcond: float = 1e-12) -> RegressionFit:
    """Ordinary least squares of targets on the basis evaluated at states.

    Uses a thin SVD, so rank deficiency truncates small singular values
    instead of failing; that event is recorded in ``flags``.
    """
    basis = basis or BasisSpec()
    y = np.asarray(targets, dtype=float)
    x = np.asarray(states, dtype=float)
    if y.shape != x.shape or y.ndim != 1:
        raise ShapeMismatch(f"targets {y.shape} and states {x.shape} must be equal 1-d shapes")
    n = y.size
    flags = []
    if n == 0:
        raise ShapeMismatch("no samples")
    if _degenerate(x):
        mean = float(np.mean(y))
        var = float(np.var(y, ddof=1)) if n > 1 else 0.0
        return RegressionFit(BasisSpec("polynomial", degree=0), np.array([mean]), float(x[0]), 1.0,
                             None, 1, 1.0, var, n, ["degenerate-state"])
    used = basis.reduced(n)
    if used != basis:
        flags.append(f"basis reduced to {used.dimension} columns for {n} samples")
    center = float(np.mean(x))
    scale = float(np.std(x)) or 1.0
    knots = None
    if used.family == "piecewise-linear":
        z = (x - center) / scale
        knots = np.unique(np.quantile(z, np.linspace(0, 1, used.knots)))
        if knots.size < 2:
            knots = np.array([z.min(), z.max() + 1.0])
        used = BasisSpec("piecewise-linear", degree=used.degree, knots=int(knots.size))
    X = _design(x, used, center, scale, knots)
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    keep = s > rcond * s[0]
    rank = int(np.count_nonzero(keep))
    if rank < X.shape[1]:
        flags.append(f"rank deficient: rank {rank} of {X.shape[1]}, truncated solution")
    u, s, vt = u[:, keep], s[keep], vt[keep]
    uty = u.T @ y
    coef = vt.T @ (uty / s)
    resid = y - u @ uty
    dof = max(n - rank, 1)
    var = float(resid @ resid / dof)
    cond = float(s[0] / s[-1])
    return RegressionFit(used, coef, center, scale, knots, rank, cond, var, n, flags, vt, 1.0 / s)


def regress(targets, states, basis: BasisSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Fitted values and their standard errors at the training states."""
    fit = fit_conditional(targets, states, basis)
    return fit.predict(states), fit.prediction_se(states)


def conditional_expectation(ensemble, node: int, values, basis: BasisSpec | None = None,
                            state=None) -> np.ndarray:
    """E[values | state at node] along the ensemble paths.

    ``values`` holds one realized functional per path. The regression state
    defaults to gamma at the node; deterministic ensembles reduce to the
    plain path average.
    """
    values = np.asarray(values, dtype=float)
    st = ensemble.gamma[:, node] if state is None else np.asarray(state, dtype=float)
    return fit_conditional(values, st, basis).predict(st)


def fit_with_increment(targets, states, increments, basis: BasisSpec | None = None,
                       rcond: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Joint fit targets ~ a(state) + b(state) * increment.

    Returns (a, b, se of a) at the training states. ``a`` is the
    conditional mean and ``b`` the loading on the increment; the residual
    is orthogonal to both parts, which makes a controlled estimate of a.
    """
    basis = basis or BasisSpec()
    y = np.asarray(targets, dtype=float)
    x = np.asarray(states, dtype=float)
    dw = np.asarray(increments, dtype=float)
    if not (y.shape == x.shape == dw.shape) or y.ndim != 1:
        raise ShapeMismatch("targets, states and increments must be equal 1-d shapes")
    n = y.size
    if _degenerate(x):
        X = np.ones((n, 1))
    else:
        used = basis.reduced(max(n // 2, 1))
        center = float(np.mean(x))
        scale = float(np.std(x)) or 1.0
        knots = None
        if used.family == "piecewise-linear":
            z = (x - center) / scale
            knots = np.unique(np.quantile(z, np.linspace(0, 1, used.knots)))
            if knots.size < 2:
                knots = np.array([z.min(), z.max() + 1.0])
            used = BasisSpec("piecewise-linear", degree=used.degree, knots=int(knots.size))
        X = _design(x, used, center, scale, knots)
    p = X.shape[1]
    D = np.hstack([X, X * dw[:, None]])
    u, s, vt = np.linalg.svd(D, full_matrices=False)
    keep = s > rcond * s[0]
    u, s, vt = u[:, keep], s[keep], vt[keep]
    coef = vt.T @ ((u.T @ y) / s)
    resid = y - D @ coef
    var = float(resid @ resid / max(n - int(keep.sum()), 1))
    a = X @ coef[:p]
    b = X @ coef[p:]
    # leverage of the mean part: rows [X, 0] of the joint design
    Xa = np.hstack([X, np.zeros_like(X)])
    lev = np.sum((Xa @ vt.T / s) ** 2, axis=1)
    return a, b, np.sqrt(var * lev)
