"""Backward solvers for the singular BSDE and its remainder processes.

Y-type solutions live on the nodes strictly before the cutoff T - eps_cut
(or before T when eps_cut = 0). H-type solutions cover every node and
vanish at T. All schemes run backward node by node, replacing conditional
expectations by regressions on gamma_t.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._numerics import solve_increasing
from .drivers import (DriverSpec, _f_at_phi, check_conditions, eval_phi, eval_phi_derivs,
                      eval_vartheta, flow_in_G)
from .errors import ConditionRefused, ConfigError, NoContraction, ShapeMismatch
from .forward import ForwardModel, PathEnsemble, TimeGrid, compute_A_detailed, estimate_ZA
from .lsmc import BasisSpec, fit_conditional, fit_with_increment

QUANTILES = (5, 25, 50, 75, 95)
ASSEMBLY_MODES = ("symmetric", "sharp", "hat")


def y_last_index(grid: TimeGrid) -> int:
    """Last node a Y-type solver uses: the cutoff node, stepping back if it is T."""
    k = grid.cutoff_index
    return k - 1 if grid.time_to_go[k] <= 0 else k


@dataclass
class BsdeSolution:
    """Values (paths x nodes) and Z (paths x steps) of a backward solve.

    ``kind`` is "Y" or "H"; ``stderr`` holds per-entry regression standard
    errors when the scheme is stochastic.
    """

    grid: TimeGrid
    values: np.ndarray
    z_values: np.ndarray
    scheme: str
    kind: str = "Y"
    meta: dict = field(default_factory=dict)
    weighted_norm: float | None = None
    stderr: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[:self.n_nodes]

    @property
    def time_to_go(self) -> np.ndarray:
        return self.grid.time_to_go[:self.n_nodes]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def mc_stderr(self) -> np.ndarray:
        """Standard error of the node-wise path average."""
        m = self.values.shape[0]
        if m < 2:
            return np.zeros(self.n_nodes)
        return self.values.std(axis=0, ddof=1) / math.sqrt(m)

    def quantile_table(self) -> list[list[float]]:
        pct = np.percentile(self.values, QUANTILES, axis=0)
        mean, se = self.mean(), self.mc_stderr()
        return [[t, s, mean[k], se[k], *pct[:, k]]
                for k, (t, s) in enumerate(zip(self.times, self.time_to_go))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "time_to_go", "mean", "stderr"] + [f"p{q:02d}" for q in QUANTILES])
            for row in self.quantile_table():
                w.writerow(["%.12g" % v for v in row])

    def save(self, path) -> None:
        np.savez_compressed(path, nodes=self.grid.nodes, eps_cut=self.grid.eps_cut,
                            ratio=self.grid.ratio, values=self.values, z_values=self.z_values,
                            stderr=self.stderr if self.stderr is not None else np.zeros(0),
                            scheme=self.scheme, kind=self.kind, meta=json.dumps(self.meta),
                            weighted_norm=np.nan if self.weighted_norm is None
                            else self.weighted_norm)

    @classmethod
    def load(cls, path) -> "BsdeSolution":
        with np.load(path) as d:
            grid = TimeGrid(d["nodes"], float(d["eps_cut"]), float(d["ratio"]))
            wn = float(d["weighted_norm"])
            se = d["stderr"]
            return cls(grid, d["values"].copy(), d["z_values"].copy(), str(d["scheme"]),
                       str(d["kind"]), json.loads(str(d["meta"])),
                       None if math.isnan(wn) else wn, se.copy() if se.size else None)

    def summary(self) -> dict:
        return {"scheme": self.scheme, "kind": self.kind, "nodes": self.n_nodes,
                "paths": int(self.values.shape[0]), "value_at_0": float(self.mean()[0]),
                "weighted_norm": self.weighted_norm, "meta": self.meta,
                "grid": self.grid.to_dict()}


# regression helpers


def _cond_mean(target: np.ndarray, state: np.ndarray, basis, with_se: bool = False):
    fit = fit_conditional(target, state, basis)
    pred = fit.predict(state)
    if with_se:
        return pred, fit.prediction_se(state)
    return pred


def estimate_z(values: np.ndarray, ensemble: PathEnsemble, basis: BasisSpec | None = None
               ) -> np.ndarray:
    """Z of an adapted process given on the first nodes of the ensemble grid,
    from the joint fit V_{k+1} ~ a(gamma_k) + Z(gamma_k) dW_k."""
    k_max = values.shape[1] - 1
    z = np.zeros((values.shape[0], k_max))
    for k in range(k_max):
        _, z[:, k], _ = fit_with_increment(values[:, k + 1], ensemble.gamma[:, k],
                                           ensemble.dw[:, k], basis)
    return z


# deterministic reference


def _envelope_values(spec: DriverSpec, eta: float, lam: float, s: np.ndarray) -> np.ndarray:
    """Solution of y' = lam + f(y)/eta with y(0+) = inf, at the points s > 0."""
    if lam == 0:
        return np.asarray(eval_phi(spec, s / eta), dtype=float)
    if spec.closed_form:
        order = np.argsort(s)
        u = flow_in_G(spec, np.zeros(1), s[order], eta, lam)
        out = np.empty_like(s)
        out[order] = eval_phi(spec, u)
        return out
    return np.array([eval_vartheta(spec, eta, lam, float(v)) for v in s])


def solve_ode(spec: DriverSpec, eta: float, lam: float, grid: TimeGrid) -> BsdeSolution:
    """Deterministic Y(t) = vartheta_{eta,lam}(T - t) on the grid up to the cutoff."""
    if not eta > 0:
        raise ConfigError("eta must be positive")
    k = y_last_index(grid)
    s = grid.time_to_go[:k + 1]
    vals = _envelope_values(spec, float(eta), float(lam), s)[None, :]
    return BsdeSolution(grid, vals, np.zeros((1, k)), "ode", "Y",
                        {"eta": float(eta), "lambda": float(lam)})


# penalized scheme


def _flow_step(spec: DriverSpec, y_hat: np.ndarray, dt: float, eta: np.ndarray,
               lam: np.ndarray, max_stiffness: float = 0.5, max_substeps: int = 10_000
               ) -> np.ndarray:
    """Flow of dy/ds = f(y)/eta + lam over a length dt, computed in u = G(y).

    In u the equation reads du/ds = 1/eta + lam/phi'(u); it is exact for
    lam = 0 and integrated by RK4 otherwise, with enough substeps to keep
    dt*|lam*f'/f| below ``max_stiffness``.
    """
    u = np.asarray(_G_vec(spec, y_hat))
    if np.all(lam == 0):
        return np.asarray(eval_phi(spec, u + dt / eta), dtype=float)
    # explicit Euler undershoots the true end point, so f'/f there bounds the stiffness
    with np.errstate(over="ignore", invalid="ignore"):
        y_end = y_hat + dt * (spec.f(y_hat) / eta + lam)
        y_probe = np.maximum(np.minimum(y_end, y_hat), 1e-3 * y_hat)
        stiff = dt * np.abs(lam * spec.df(y_probe) / spec.f(y_probe))
    stiff = float(np.nanmax(np.where(np.isfinite(stiff), stiff, 0.0)))
    m = int(min(max(1, math.ceil(stiff / max_stiffness)), max_substeps))
    h = dt / m

    def rate(v):
        slope = _f_at_phi(spec, v, need_second=False)[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return 1.0 / eta + np.where(np.isfinite(slope) & (slope != 0), lam / slope, 0.0)

    for _ in range(m):
        k1 = rate(u)
        k2 = rate(u + 0.5 * h * k1)
        k3 = rate(u + 0.5 * h * k2)
        k4 = rate(u + h * k3)
        u = u + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return np.asarray(eval_phi(spec, u), dtype=float)


def _G_vec(spec: DriverSpec, y: np.ndarray) -> np.ndarray:
    from .drivers import _G_closed
    return _G_closed(spec, np.asarray(y, dtype=float))


def _implicit_step(spec: DriverSpec, y_hat: np.ndarray, dt: float, eta: np.ndarray,
                   lam: np.ndarray, context: str = "") -> np.ndarray:
    """Root of y - dt f(y)/eta = y_hat + dt lam (strictly increasing in y)."""
    rhs = y_hat + dt * lam
    lo = np.minimum(rhs, 0.0) + dt * spec.f(np.zeros_like(rhs)) / eta
    hi = np.maximum(rhs, 0.0)

    def g(y):
        return y - dt * spec.f(y) / eta - rhs

    def dg(y):
        return 1.0 - dt * spec.df(y) / eta

    # for drivers with f(0) < 0 the lower end may need to move further down
    for _ in range(200):
        bad = g(lo) > 0
        if not bad.any():
            break
        lo = np.where(bad, lo - (1.0 + np.abs(lo)), lo)
    return solve_increasing(g, dg, lo, hi, x0=np.clip(y_hat, lo, hi), context=context)


STEP_RULES = ("flow", "implicit")


def solve_penalized(spec: DriverSpec, model: ForwardModel, ensemble: PathEnsemble, n: float,
                    basis: BasisSpec | None = None, step: str = "flow") -> BsdeSolution:
    """Y^n with terminal value n placed at the cutoff node (T itself when eps_cut = 0).

    ``step="flow"`` integrates the node ODE in G-coordinates (requires a
    closed-form driver, falls back to the implicit rule otherwise or where
    the conditional mean is not positive). ``step="implicit"`` is the
    backward Euler rule y - dt f(y)/eta = y_hat + dt lam. The conditional
    mean y_hat and Z come from one joint fit Y_{k+1} ~ a(gamma) + Z(gamma) dW.
    """
    if step not in STEP_RULES:
        raise ConfigError(f"unknown step rule {step!r}")
    if not n > 0:
        raise ConfigError("penalty level must be positive")
    grid = ensemble.grid
    k_last = grid.cutoff_index
    m = ensemble.n_paths
    Y = np.empty((m, k_last + 1))
    se = np.zeros_like(Y)
    Z = np.zeros((m, k_last))
    Y[:, k_last] = n
    steps = grid.steps
    use_flow = step == "flow" and spec.closed_form
    for k in range(k_last - 1, -1, -1):
        t, dt = grid.nodes[k], steps[k]
        st = ensemble.gamma[:, k]
        if model.deterministic:
            y_hat, se[:, k] = _cond_mean(Y[:, k + 1], st, basis, with_se=True)
        else:
            y_hat, Z[:, k], se[:, k] = fit_with_increment(Y[:, k + 1], st, ensemble.dw[:, k],
                                                          basis)
        eta = 1.0 / st
        lam = model.lam_at(t, st)
        if use_flow:
            pos = y_hat > 0
            out = np.empty(m)
            if pos.any():
                out[pos] = _flow_step(spec, y_hat[pos], dt, eta[pos], lam[pos])
            if (~pos).any():
                out[~pos] = _implicit_step(spec, y_hat[~pos], dt, eta[~pos], lam[~pos],
                                           f"at node {k} (t={t:.6g})")
            Y[:, k] = out
        else:
            Y[:, k] = _implicit_step(spec, y_hat, dt, eta, lam, f"at node {k} (t={t:.6g})")
    return BsdeSolution(grid, Y, Z, f"penalized({n:g})", "Y",
                        {"penalty": float(n), "step": "flow" if use_flow else "implicit"},
                        stderr=se)


# generators


@dataclass(frozen=True)
class GeneratorBundle:
    """Generators of the remainder equations for one driver and forward model.

    F and L belong to the symmetric expansion Y = phi(A) - phi'(A) H, whose
    remainder solves -dH = (F + L) dt - Z^H dW. F_sharp is the power-case
    generator of Y = eta^{1/q} phi(T-t) - phi'(T-t) H, and F_hat the
    generator of Y = phi(A) - psi*(t) H with psi*(t) = phi'((T-t)/eta_cap).
    """

    spec: DriverSpec
    model: ForwardModel

    # symmetric expansion

    def kappas(self, A):
        from .drivers import kappa1, kappa2
        return kappa1(self.spec, A), kappa2(self.spec, A)

    def F(self, gamma, A, h):
        """gamma * [f(phi + psi h) - f(phi) - f'(phi) psi h] / psi with psi = -phi'(A)."""
        A, h = np.asarray(A, float), np.asarray(h, float)
        f0, f1, _ = _f_at_phi(self.spec, A, need_second=False)
        y0 = np.asarray(eval_phi(self.spec, A), float)
        psi = -f0
        rem = self.spec.f(y0 + psi * h) - f0 - f1 * psi * h
        return gamma * rem / psi

    def L(self, A, ZA, h, z, lam=0.0):
        """Linear part: varpi + (k1 k2/2)(Z^A/A)^2 h - k1 (Z^A/A) z.

        The z coefficient carries a minus sign because Z^A is the loading
        in dA = -gamma dt + Z^A dW.
        """
        k1, k2 = self.kappas(A)
        r = np.asarray(ZA, float) / np.asarray(A, float)
        return self.varpi(A, ZA, lam) + 0.5 * k1 * k2 * r * r * h - k1 * r * z

    def varpi(self, A, ZA, lam=0.0):
        """L at (h, z) = (0, 0): k1 (Z^A)^2/(2A) - lam/phi'(A)."""
        A = np.asarray(A, float)
        d1, _, _ = eval_phi_derivs(self.spec, A)
        k1, _ = self.kappas(A)
        return 0.5 * k1 * np.asarray(ZA, float) ** 2 / A - lam / d1

    # power case

    def _power_q(self) -> float:
        if self.spec.kind != "power":
            raise ConditionRefused("the sharp generator needs a power driver")
        return self.spec.q

    def _sharp_pieces(self, s, gamma, h):
        q = self._power_q()
        s = np.asarray(s, float)
        gamma = np.asarray(gamma, float)
        zeta = gamma ** (-1.0 / q)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.asarray(h, float) / (q * s)
        return q, s, zeta, c

    @staticmethod
    def _remainder_quotient(q, zeta, c):
        """I(c) = [g(zeta+c) - g(zeta) - g'(zeta) c]/c^2 and dI/dc for
        g(u) = |u|^q u / (q(q+1)); a Taylor series is used for small |c|."""

        def g(u):
            return np.abs(u) ** q * u / (q * (q + 1))

        def g1(u):
            return np.abs(u) ** q / q

        zeta, c = np.broadcast_arrays(np.asarray(zeta, float), np.asarray(c, float))
        if q == 1 and np.all(zeta + c >= 0):
            # g is the quadratic u^2/2 on the half line
            return np.full(zeta.shape, 0.5), np.zeros(zeta.shape)
        I = np.empty(zeta.shape)
        dI = np.empty(zeta.shape)
        small = np.abs(c) < 1e-2 * zeta
        z, cs = zeta[small], c[small]
        d2 = z ** (q - 1)
        d3 = (q - 1) * z ** (q - 2)
        d4 = (q - 1) * (q - 2) * z ** (q - 3)
        d5 = (q - 1) * (q - 2) * (q - 3) * z ** (q - 4)
        I[small] = d2 / 2 + d3 * cs / 6 + d4 * cs ** 2 / 24 + d5 * cs ** 3 / 120
        dI[small] = d3 / 6 + d4 * cs / 12 + d5 * cs ** 2 / 40
        big = ~small
        z, cb = zeta[big], c[big]
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            Ib = (g(z + cb) - g(z) - g1(z) * cb) / cb ** 2
            I[big] = Ib
            dI[big] = (g1(z + cb) - g1(z) - 2 * cb * Ib) / cb ** 2
        return I, dI

    def F_sharp(self, s, gamma, h, lam=0.0, b_zeta=0.0):
        """q s [lam (q s)^{1/q} + b^zeta] - (q+1)/(q eta s^2) h^2 I(h/(q s)); zero at s = 0."""
        q, s, zeta, c = self._sharp_pieces(s, gamma, h)
        h = np.asarray(h, float)
        I, _ = self._remainder_quotient(q, zeta, c)
        eta = 1.0 / np.asarray(gamma, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = q * s * (lam * (q * s) ** (1.0 / q) + b_zeta) \
                - (q + 1) / (q * eta * s * s) * h * h * I
        return np.where(s > 0, out, 0.0)

    def dF_sharp(self, s, gamma, h):
        q, s, zeta, c = self._sharp_pieces(s, gamma, h)
        h = np.asarray(h, float)
        I, dI = self._remainder_quotient(q, zeta, c)
        eta = 1.0 / np.asarray(gamma, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -(q + 1) / (q * eta * s * s) * (2 * h * I + h * h * dI / (q * s))
        return np.where(s > 0, out, 0.0)

    # general case

    def psi_star(self, s, shift: float = 0.0):
        """phi'((T-t+shift)/eta_cap) (negative)."""
        return np.asarray(eval_phi_derivs(self.spec, (np.asarray(s, float) + shift)
                                          / self.model.eta_cap)[0], float)

    def hat_linear(self, s, eps: float = 0.0):
        """Coefficient of h in the hat generator: -f'(phi((T-t+eps)/eta_cap))/eta_cap."""
        _, f1, _ = _f_at_phi(self.spec, (np.asarray(s, float) + eps) / self.model.eta_cap,
                             need_second=False)
        return -f1 / self.model.eta_cap

    def hat_varpi(self, s, A, ZA, lam=0.0):
        P = -self.psi_star(s)
        _, d2, _ = eval_phi_derivs(self.spec, np.asarray(A, float))
        return (lam + 0.5 * d2 * np.asarray(ZA, float) ** 2) / P

    def hat_f_part(self, s, gamma, A, h, delta: float = 0.0):
        """gamma [f(phi(A) - psi*_delta h) - f(phi(A))] / (-psi*), nonpositive for h >= 0."""
        P = -self.psi_star(s)
        Pd = -self.psi_star(s, delta) if delta else P
        y0 = np.asarray(eval_phi(self.spec, np.asarray(A, float)), float)
        f0 = _f_at_phi(self.spec, np.asarray(A, float), need_second=False)[0]
        return gamma * (self.spec.f(y0 + Pd * h) - f0) / P

    def F_hat(self, s, gamma, A, ZA, h, lam=0.0, delta: float = 0.0, eps: float = 0.0):
        return (self.hat_f_part(s, gamma, A, h, delta) + self.hat_linear(s, eps) * h
                + self.hat_varpi(s, A, ZA, lam))


# Picard scheme for the power case


def picard_constants(spec: DriverSpec, model: ForwardModel, n_s: int = 60, n_r: int = 41,
                     n_g: int = 9) -> dict:
    """Radius R, local Lipschitz constant L and window length delta.

    L is the largest |dF_sharp/dh| over h = s^2 r with |r| <= R, s in
    (0, delta_max] and gamma in its band, found on a grid.
    """
    if spec.kind != "power":
        raise ConditionRefused("the Picard scheme needs a power driver")
    q = spec.q
    lam_norm = model.lambda_norm()
    bz = model.b_zeta_norm(q)
    R = 2.0 * (q ** (1 + 1 / q) * lam_norm + q * bz)
    zeta_floor = model.eta_floor ** (1.0 / q)
    if R == 0:
        return {"R": 0.0, "L": 0.0, "delta": 1.0, "lambda_norm": lam_norm, "b_zeta_norm": bz}
    d_max = min(1.0, zeta_floor / (q * R))
    bundle = GeneratorBundle(spec, model)
    s = np.geomspace(1e-6 * d_max, d_max, n_s)[:, None, None]
    r = np.linspace(-R, R, n_r)[None, :, None]
    lo, hi = model.gamma_range
    g = np.linspace(lo, hi, n_g)[None, None, :]
    S, Rr, Gm = np.broadcast_arrays(s, r, g)
    L = float(np.nanmax(np.abs(bundle.dF_sharp(S, Gm, S * S * Rr))))
    delta = min(1.0, 1.0 / (2 * L) if L > 0 else 1.0, zeta_floor / (q * R))
    return {"R": R, "L": L, "delta": delta, "lambda_norm": lam_norm, "b_zeta_norm": bz}


def _cumulative_from_end(vals: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """int_{t_k}^{t_last} by the trapezoid rule, per path; last column zero."""
    pieces = 0.5 * (vals[:, 1:] + vals[:, :-1]) * np.diff(nodes)[None, :]
    out = np.zeros_like(vals)
    out[:, :-1] = np.cumsum(pieces[:, ::-1], axis=1)[:, ::-1]
    return out


def solve_picard_sharp(spec: DriverSpec, model: ForwardModel, ensemble: PathEnsemble,
                       tol: float = 1e-10, max_iter: int = 60, basis: BasisSpec | None = None,
                       constants: dict | None = None) -> BsdeSolution:
    """H_sharp by Picard iteration on the last delta of time, then a
    theta = 1/2 backward scheme on the rest of the grid."""
    if spec.kind != "power":
        raise ConditionRefused("the Picard scheme needs a power driver")
    consts = constants or picard_constants(spec, model)
    q = spec.q
    grid = ensemble.grid
    nodes, s_all = grid.nodes, grid.time_to_go
    gamma = ensemble.gamma
    m, n_nodes = gamma.shape
    bundle = GeneratorBundle(spec, model)
    lam = model.lam_at(nodes[None, :], gamma)
    bz = model.b_zeta(nodes[None, :], gamma, q)
    j0 = int(np.searchsorted(s_all <= consts["delta"] + 1e-14, True))
    win = slice(j0, n_nodes)
    s_w = s_all[win]
    weight = np.where(s_w > 0, 1.0 / np.where(s_w > 0, s_w, 1.0) ** 2, 0.0)

    def gen(H, cols):
        return bundle.F_sharp(s_all[None, cols], gamma[:, cols], H, lam[:, cols], bz[:, cols])

    def picard_map(H):
        integral = _cumulative_from_end(gen(H, win), nodes[win])
        out = np.empty_like(integral)
        for i in range(integral.shape[1]):
            k = j0 + i
            out[:, i] = _cond_mean(integral[:, i], gamma[:, k], basis)
        out[:, -1] = 0.0
        return out

    H = np.zeros((m, n_nodes - j0))
    diffs, ratios = [], []
    streak = 0
    converged = False
    for it in range(1, max_iter + 1):
        new = picard_map(H)
        d = float(np.max(np.abs(new - H) * weight[None, :]))
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
            streak = streak + 1 if ratios[-1] > 0.9 else 0
        diffs.append(d)
        H = new
        if d < tol:
            converged = True
            break
        if streak >= 3:
            raise NoContraction(f"Picard ratios {ratios[-3:]} exceed 0.9 for 3 iterations")
    full = np.zeros((m, n_nodes))
    full[:, win] = H
    # theta scheme on [0, t_j0]
    steps = grid.steps
    for k in range(j0 - 1, -1, -1):
        dt = steps[k]
        nxt = full[:, k + 1]
        carry = nxt + 0.5 * dt * gen(nxt[:, None], [k + 1])[:, 0]
        base = _cond_mean(carry, gamma[:, k], basis)
        sk = s_all[k]

        def g(h, base=base, sk=sk, k=k, dt=dt):
            return h - 0.5 * dt * bundle.F_sharp(sk, gamma[:, k], h, lam[:, k], bz[:, k]) - base

        def dg(h, sk=sk, k=k, dt=dt):
            return 1.0 - 0.5 * dt * bundle.dF_sharp(sk, gamma[:, k], h)

        lo, hi = base - 1.0 - np.abs(base), base + 1.0 + np.abs(base)
        for _ in range(60):
            bad_lo, bad_hi = g(lo) > 0, g(hi) < 0
            if not (bad_lo.any() or bad_hi.any()):
                break
            lo = np.where(bad_lo, lo - 2 * (hi - lo), lo)
            hi = np.where(bad_hi, hi + 2 * (hi - lo), hi)
        full[:, k] = solve_increasing(g, dg, lo, hi, x0=base, context=f"at node {k}")
    Z = estimate_z(full, ensemble, basis) if not model.deterministic else np.zeros((m, n_nodes - 1))
    meta = dict(consts, iterations=len(diffs), differences=diffs, ratios=ratios,
                converged=converged, window_start=int(j0))
    wn = float(np.max(np.abs(H) * weight[None, :])) if H.size else 0.0
    return BsdeSolution(grid, full, Z, "picard_sharp", "H", meta, weighted_norm=wn)


# general case


def solve_general_hat(spec: DriverSpec, model: ForwardModel, ensemble: PathEnsemble,
                      regularization: tuple[float, float] | None = None,
                      basis: BasisSpec | None = None, A: np.ndarray | None = None,
                      ZA: np.ndarray | None = None, conditions=None) -> BsdeSolution:
    """H_hat backward from H_T = 0: implicit in the f-part, explicit in the
    linear part. ``regularization=(delta, eps)`` shifts the time to go in
    psi* by delta inside the f-part and by eps in the linear coefficient."""
    report = conditions if conditions is not None else check_conditions(spec)
    if not report.c2:
        raise ConditionRefused("the hat scheme needs condition C2 (bounded kappa1)")
    delta, eps = regularization if regularization is not None else (0.0, 0.0)
    if delta < 0 or eps < 0:
        raise ConfigError("regularization shifts must be nonnegative")
    grid = ensemble.grid
    if A is None or ZA is None:
        detail = compute_A_detailed(model, ensemble, basis)
        A = detail.values if A is None else A
        ZA = estimate_ZA(model, ensemble, detail, basis) if ZA is None else ZA
    bundle = GeneratorBundle(spec, model)
    m, n_nodes = ensemble.gamma.shape
    s_all = grid.time_to_go
    steps = grid.steps
    H = np.zeros((m, n_nodes))
    se = np.zeros_like(H)
    for k in range(n_nodes - 2, -1, -1):
        dt, s, t = steps[k], s_all[k], grid.nodes[k]
        st = ensemble.gamma[:, k]
        h_hat, se[:, k] = _cond_mean(H[:, k + 1], st, basis, with_se=True)
        lam = model.lam_at(t, st)
        rhs = h_hat * (1.0 + dt * bundle.hat_linear(s, eps)) \
            + dt * bundle.hat_varpi(s, A[:, k], ZA[:, k], lam)
        Ak = A[:, k]
        pos = rhs > 0
        out = rhs.copy()
        if pos.any():
            gk, Ap, r = st[pos], Ak[pos], rhs[pos]
            P = -float(bundle.psi_star(s))
            Pd = -float(bundle.psi_star(s, delta)) if delta else P
            y0 = np.asarray(eval_phi(spec, Ap), float)
            f0 = spec.f(y0)

            def g(h, gk=gk, y0=y0, f0=f0, r=r, P=P, Pd=Pd, dt=dt):
                return h - dt * gk * (spec.f(y0 + Pd * h) - f0) / P - r

            def dg(h, gk=gk, y0=y0, P=P, Pd=Pd, dt=dt):
                return 1.0 - dt * gk * Pd * spec.df(y0 + Pd * h) / P

            out[pos] = solve_increasing(g, dg, np.zeros_like(r), r, x0=r,
                                        context=f"at node {k} (t={t:.6g})")
        H[:, k] = out
    Z = np.zeros((m, n_nodes - 1))
    scheme = "general_hat" if regularization is None else f"regularized({delta:g},{eps:g})"
    return BsdeSolution(grid, H, Z, scheme, "H", {"delta": delta, "eps": eps}, stderr=se)


# assembly


def _check_mode(mode: str):
    if mode not in ASSEMBLY_MODES:
        raise ConfigError(f"unknown assembly mode {mode!r}")


def _assembly_parts(spec: DriverSpec, A: np.ndarray, grid: TimeGrid, k: int, mode: str,
                    gamma: np.ndarray | None, eta_cap: float | None):
    """(base, slope) with Y = base + slope * H on the first k nodes."""
    s = grid.time_to_go[:k]
    if mode == "symmetric":
        Ak = A[:, :k]
        return np.asarray(eval_phi(spec, Ak), float), -np.asarray(eval_phi_derivs(spec, Ak)[0])
    if mode == "sharp":
        if spec.kind != "power":
            raise ConditionRefused("sharp assembly needs a power driver")
        if gamma is None:
            raise ConfigError("sharp assembly needs the gamma paths")
        zeta = gamma[:, :k] ** (-1.0 / spec.q)
        base = zeta * np.asarray(eval_phi(spec, s), float)[None, :]
        slope = -np.asarray(eval_phi_derivs(spec, s)[0], float)[None, :]
        return base, np.broadcast_to(slope, base.shape)
    if eta_cap is None:
        raise ConfigError("hat assembly needs eta_cap")
    base = np.asarray(eval_phi(spec, A[:, :k]), float)
    slope = -np.asarray(eval_phi_derivs(spec, s / eta_cap)[0], float)[None, :]
    return base, np.broadcast_to(slope, base.shape)


def assemble_Y(spec: DriverSpec, A: np.ndarray, H: BsdeSolution, mode: str,
               gamma: np.ndarray | None = None, eta_cap: float | None = None,
               ensemble: PathEnsemble | None = None, basis: BasisSpec | None = None
               ) -> BsdeSolution:
    """Y from a remainder H.

    symmetric: phi(A) - phi'(A) H; sharp: eta^{1/q} phi(T-t) - phi'(T-t) H;
    hat: phi(A) - psi*(t) H. Values are returned on the Y nodes (up to the
    cutoff). Z is estimated by regression when an ensemble is given.
    """
    _check_mode(mode)
    A = np.asarray(A, float)
    if A.shape[0] != H.values.shape[0] or A.shape[1] < H.n_nodes:
        if not (A.shape[0] == 1 or H.values.shape[0] == 1):
            raise ShapeMismatch(f"A {A.shape} does not match H {H.values.shape}")
    k = min(y_last_index(H.grid), H.n_nodes - 1) + 1
    if gamma is None and ensemble is not None:
        gamma = ensemble.gamma
    base, slope = _assembly_parts(spec, A, H.grid, k, mode, gamma, eta_cap)
    Y = base + slope * H.values[:, :k]
    if ensemble is not None and Y.shape[0] == ensemble.n_paths:
        Z = estimate_z(Y, ensemble, basis)
    else:
        Z = np.zeros((Y.shape[0], k - 1))
    return BsdeSolution(H.grid, Y, Z, f"assembled-{mode}:{H.scheme}", "Y",
                        {"mode": mode, "source": H.scheme})


def decompose_H(spec: DriverSpec, A: np.ndarray, Y: BsdeSolution, mode: str,
                gamma: np.ndarray | None = None, eta_cap: float | None = None) -> BsdeSolution:
    """Inverse of assemble_Y on the Y nodes."""
    _check_mode(mode)
    A = np.asarray(A, float)
    k = Y.n_nodes
    if A.shape[1] < k or (A.shape[0] != Y.values.shape[0] and A.shape[0] != 1
                          and Y.values.shape[0] != 1):
        raise ShapeMismatch(f"A {A.shape} does not match Y {Y.values.shape}")
    base, slope = _assembly_parts(spec, A, Y.grid, k, mode, gamma, eta_cap)
    H = (Y.values - base) / slope
    return BsdeSolution(Y.grid, H, np.zeros((H.shape[0], k - 1)), f"decomposed-{mode}:{Y.scheme}",
                        "H", {"mode": mode, "source": Y.scheme})
