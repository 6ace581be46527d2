"""Numerical checks of the a-priori bounds, generator identities and BSDE residuals.

Almost-sure inequalities are turned into violation counts measured against a
statistical budget; every check records what it tested, the tolerance and
the verdict.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .drivers import CompanionTable, eval_phi, eval_phi_derivs, kappa1, kappa2
from .errors import ConfigError, ShapeMismatch
from .forward import ForwardModel, PathEnsemble, TimeGrid, compute_A, simulate
from .lsmc import BasisSpec, fit_conditional
from .solvers import BsdeSolution, GeneratorBundle, _envelope_values, _flow_step

SCHEMA_VERSION = "1"
# one-sided 3-sigma false positive rate plus slack
DEFAULT_RATE = 0.00135 + 0.001
# relative size of residuals treated as rounding in the t-tests
ROUNDING = 1e-9


@dataclass
class CheckResult:
    name: str
    property: str
    nodes_tested: int
    violations: int
    max_violation: float
    tolerance: str
    budget: int
    passed: bool
    details: dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        return check

    def extend(self, other: "VerificationReport") -> "VerificationReport":
        self.checks.extend(other.checks)
        self.environment.update(other.environment)
        return self

    def get(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "passed": self.passed,
                "checks": [asdict(c) for c in self.checks], "environment": self.environment}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _count(excess: np.ndarray, name: str, prop: str, tol_text: str, rate: float,
           details: dict | None = None) -> CheckResult:
    """Violations are entries with excess > 0 (excess already net of tolerance)."""
    excess = np.asarray(excess, float)
    n = int(excess.size)
    bad = ~(excess <= 0)
    v = int(np.count_nonzero(bad))
    worst = float(np.nanmax(np.where(np.isnan(excess), np.inf, excess))) if n else 0.0
    budget = int(math.floor(rate * n))
    return CheckResult(name, prop, n, v, max(worst, 0.0), tol_text, budget,
                       n > 0 and v <= budget, details or {})


def _node_tolerance(sol: BsdeSolution, n_sigma: float, stderr, ref) -> np.ndarray:
    se = stderr if stderr is not None else sol.stderr
    tol = 1e-9 * np.abs(ref)
    if se is not None:
        se = np.asarray(se, float)[:, :sol.n_nodes]
        tol = tol + n_sigma * se
    return tol


def check_bounds(Y: BsdeSolution, A: np.ndarray, comp: CompanionTable, n_sigma: float = 3.0,
                 max_rate: float | None = None, stderr=None, lower: bool = True,
                 upper: bool = True, sandwich: bool = True, signed_lambda: bool = False,
                 eta_floor: float | None = None, tail: float = 0.25) -> VerificationReport:
    """phi(A) <= Y <= vartheta(T-t) node-wise, plus the measured near-T constant
    C_eta = max (Y - phi(A))/phi(A) over the last ``tail`` of the horizon.

    With ``signed_lambda`` the lower bound is the envelope built from
    (-|lambda|, eta_floor) instead of phi(A).
    """
    rate = DEFAULT_RATE if max_rate is None else max_rate
    k = Y.n_nodes
    A = np.asarray(A, float)
    if A.shape[1] < k or (A.shape[0] != Y.values.shape[0] and A.shape[0] != 1):
        raise ShapeMismatch(f"A {A.shape} does not cover Y {Y.values.shape}")
    s = Y.time_to_go
    vals = Y.values
    rep = VerificationReport(environment={"grid": Y.grid.to_dict(), "scheme": Y.scheme,
                                          "paths": int(vals.shape[0])})
    tol_text = f"{n_sigma:g} standard errors + 1e-9 relative"
    phiA = np.asarray(eval_phi(comp.spec, A[:, :k]), float)
    if lower:
        if signed_lambda:
            if eta_floor is None:
                raise ConfigError("signed-lambda lower bound needs eta_floor")
            low = _envelope_values(comp.spec, eta_floor, -comp.lambda_norm, s)[None, :]
            prop = "Y above the lower envelope built from -|lambda| and eta_floor"
        else:
            low = phiA
            prop = "Y >= phi(A_t)"
        tol = _node_tolerance(Y, n_sigma, stderr, low)
        rep.add(_count(low - tol - vals, "lower_bound", prop, tol_text, rate))
    if upper:
        vt = np.asarray(comp.vartheta(s), float)[None, :]
        tol = _node_tolerance(Y, n_sigma, stderr, vt)
        rep.add(_count(vals - vt - tol, "upper_bound", "Y <= vartheta(T - t)", tol_text, rate))
    if sandwich:
        T = Y.grid.horizon
        last = Y.times >= (1 - tail) * T
        ratio = vals[:, last] / phiA[:, last] - 1.0
        c_eta = float(np.max(ratio)) if ratio.size else math.nan
        ok = bool(np.isfinite(c_eta))
        rep.add(CheckResult("sandwich", "Y <= (1 + C_eta) phi(A_t) near T with C_eta finite",
                            int(ratio.size), 0 if ok else 1, 0.0 if ok else math.inf,
                            "measured, no tolerance", 0, ok,
                            {"C_eta": c_eta, "window_start": (1 - tail) * T}))
    return rep


def check_H_bounds(H: BsdeSolution, mode: str, comp: CompanionTable, R: float | None = None,
                   A: np.ndarray | None = None, scale: float = 1.0, atol: float = 1e-12,
                   max_rate: float = 0.0) -> VerificationReport:
    """0 <= H, H_T = 0 and the envelope: R (T-t)^2 for ``sharp``,
    vartheta/(-phi'(A)) for ``symmetric``, vartheta/(-psi*) for ``hat``."""
    vals = H.values
    s = H.time_to_go
    rep = VerificationReport(environment={"scheme": H.scheme, "mode": mode})
    rep.add(_count(-vals - atol, "nonnegative", "H >= 0", f"absolute {atol:g}", max_rate))
    if s[-1] == 0:
        rep.add(_count(np.abs(vals[:, -1]) - atol, "terminal_zero", "H_T = 0",
                       f"absolute {atol:g}", 0.0))
    pos = s > 0
    if mode == "sharp":
        if R is None:
            raise ConfigError("sharp envelope needs R")
        env = scale * R * s[None, :] ** 2
        excess = np.abs(vals) - env - atol
        prop = "|H| <= R (T-t)^2"
    elif mode in ("symmetric", "hat"):
        vt = np.zeros_like(s)
        vt[pos] = comp.vartheta(s[pos])
        if mode == "symmetric":
            if A is None:
                raise ConfigError("symmetric envelope needs A")
            Ak = np.asarray(A, float)[:, :H.n_nodes]
            d1 = np.zeros_like(Ak)
            d1[:, pos] = eval_phi_derivs(comp.spec, Ak[:, pos])[0]
            slope = -d1
            prop = "H <= vartheta/(-phi'(A))"
        else:
            d1 = np.zeros_like(s)
            d1[pos] = eval_phi_derivs(comp.spec, s[pos] / comp.eta_cap)[0]
            slope = -d1[None, :]
            prop = "H <= vartheta/(-psi*)"
        with np.errstate(divide="ignore", invalid="ignore"):
            env = np.where(slope > 0, scale * vt[None, :] / slope, 0.0)
        excess = (vals - env - atol)[:, pos]
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    rep.add(_count(excess, "envelope", prop, f"absolute {atol:g}, scale {scale:g}", max_rate))
    return rep


# generator identities


def singularity_witness(spec, model: ForwardModel, eps_levels=(1e-2, 1e-3, 1e-4),
                        n_steps: int = 200, n_paths: int = 200, seed: int = 0,
                        basis: BasisSpec | None = None) -> dict:
    """Mean over paths of sum_k kappa1(A_k)/(eta_k A_k) dt_k on refined grids
    stopping at T - eps, for each cutoff."""
    out = {}
    for eps in eps_levels:
        grid = TimeGrid.refined(model.horizon, n_steps, eps_cut=eps * model.horizon)
        ens = simulate(model, grid, 1 if model.deterministic else n_paths, seed)
        A = compute_A(model, ens, basis)
        k = grid.cutoff_index
        Ak = A[:, :k]
        integrand = np.asarray(kappa1(spec, Ak), float) * ens.gamma[:, :k] / Ak
        out[eps] = float(np.mean(np.sum(integrand * grid.steps[None, :k], axis=1)))
    return out


def check_generator_identities(bundle: GeneratorBundle, comp: CompanionTable,
                               n_samples: int = 2000, seed: int = 0,
                               eps_levels=(1e-2, 1e-3, 1e-4), rtol: float = 1e-9,
                               growth_floor: float = 0.9 * math.log(10.0),
                               witness_paths: int = 200) -> VerificationReport:
    """Sampled checks of F(.,0) = 0, the sign of F on h >= 0, the affine form of
    L and its coefficients, varpi >= 0 and divergence of the kappa1/(eta A)
    integral as the cutoff shrinks."""
    spec, model = bundle.spec, bundle.model
    rng = np.random.default_rng(seed)
    lo, hi = model.gamma_range
    T = model.horizon
    s = T * rng.uniform(1e-3, 1.0, n_samples)
    gamma = rng.uniform(lo, hi, n_samples)
    A = s * rng.uniform(lo, hi, n_samples)
    ZA = s * rng.normal(0.0, 0.3, n_samples)
    h = rng.exponential(1.0, n_samples) * A
    z = rng.normal(0.0, 1.0, n_samples)
    lam = model.lam_at(0.0, gamma)
    rep = VerificationReport(environment={"seed": seed, "samples": n_samples,
                                          "driver": spec.kind})
    F0 = bundle.F(gamma, A, np.zeros_like(A))
    rep.add(_count(np.abs(F0) - 1e-14, "F_zero_at_zero", "F(t, A, 0) = 0", "absolute 1e-14", 0))
    F = bundle.F(gamma, A, h)
    y0 = np.asarray(eval_phi(spec, A), float)
    scale = np.abs(gamma * spec.f(y0)) * (1 + h)
    rep.add(_count(F - rtol * scale, "F_sign", "F(t, A, h) <= 0 for h >= 0 (concave remainder)",
                   f"{rtol:g} relative", 0))
    # L: compare with coefficients built straight from phi', phi'', phi'''
    d1, d2, d3 = eval_phi_derivs(spec, A)
    ch = 0.5 * d3 / d1 * ZA ** 2
    cz = d2 / d1 * ZA
    varpi = -0.5 * d2 / d1 * ZA ** 2 - lam / d1
    L = bundle.L(A, ZA, h, z, lam)
    mag = np.abs(varpi) + np.abs(ch * h) + np.abs(cz * z) + 1.0
    rep.add(_count(np.abs(L - (varpi + ch * h + cz * z)) - rtol * mag, "L_affine",
                   "L = varpi + (k1 k2/2)(Z^A/A)^2 h - k1 (Z^A/A) z", f"{rtol:g} relative", 0))
    rep.add(_count(-varpi - rtol * np.abs(varpi), "varpi_nonnegative", "L(t, A, Z^A, 0, 0) >= 0",
                   f"{rtol:g} relative", 0))
    k1, k2 = np.asarray(kappa1(spec, A)), np.asarray(kappa2(spec, A))
    finite = bool(np.all(np.isfinite(k1)) and np.all(np.isfinite(k2)))
    details = {"kappa1_range": [float(np.min(k1)), float(np.max(k1))],
               "kappa2_range": [float(np.min(k2)), float(np.max(k2))]}
    rep.add(CheckResult("kappa_finite", "kappa1, kappa2 finite on the samples", n_samples,
                        0 if finite else 1, 0.0, "none", 0, finite, details))
    if spec.kind == "power":
        q = spec.q
        err = np.maximum(np.abs(k1 - (q + 1) / q), np.abs(k2 - (1 + 2 * q) / q))
        rep.add(_count(err - 1e-10, "power_kappas", "kappa1 = (q+1)/q, kappa2 = (1+2q)/q",
                       "absolute 1e-10", 0))
    if eps_levels:
        w = singularity_witness(spec, model, eps_levels, n_paths=witness_paths, seed=seed)
        vals = [w[e] for e in eps_levels]
        decades = np.diff(-np.log10(np.asarray(eps_levels, float)))
        growth = np.diff(vals) / decades
        rep.add(_count(growth_floor - growth, "singularity_witness",
                       "sum of kappa1/(eta A) dt grows at least log-linearly as the cutoff shrinks",
                       f"growth per decade >= {growth_floor:.4g}", 0,
                       {"integrals": dict(zip(map(str, eps_levels), vals)),
                        "growth_per_decade": growth.tolist()}))
    return rep


# residuals


def _inverse_step(spec, y: np.ndarray, dt: float, eta, lam, rule: str) -> np.ndarray:
    """Value one step later in time that the scheme maps onto y."""
    eta = np.broadcast_to(np.asarray(eta, float), y.shape)
    lam = np.broadcast_to(np.asarray(lam, float), y.shape)
    if rule == "implicit" or not spec.closed_form:
        return y - dt * (spec.f(y) / eta + lam)
    out = y - dt * (spec.f(y) / eta + lam)
    from .drivers import _G_closed
    ok = (y > 0) & (np.asarray(_G_closed(spec, np.where(y > 0, y, 1.0))) > dt / eta)
    if ok.any():
        out[ok] = _flow_step(spec, y[ok], -dt, eta[ok], lam[ok])
    return out


def _tstat(target: np.ndarray, state: np.ndarray, basis, floor: float = 0.0) -> float:
    """Largest |fitted conditional mean| / standard error over the states.

    ``floor`` is added in quadrature to the standard error so that
    rounding-level residuals of an exactly solved node do not count.
    """
    fit = fit_conditional(target, state, basis)
    pred = fit.predict(state)
    se = np.hypot(fit.prediction_se(state), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, np.abs(pred) / se, np.where(np.abs(pred) > 0, np.inf, 0.0))
    return float(np.max(t))


def check_residuals(solution: BsdeSolution, spec, model: ForwardModel, ensemble: PathEnsemble,
                    probes=None, n_probes: int = 10, basis: BasisSpec | None = None,
                    t_max: float = 4.0, det_tol: float = 1e-6, rule: str | None = None
                    ) -> VerificationReport:
    """One-step residual r = Phi^{-1}(Y_t) - Y_{t+dt} + Z dW, where Phi is the
    one-step map of the scheme (implicit Euler or the exact flow with frozen
    coefficients). For implicit Euler this is the familiar
    Y_t - Y_{t+dt} - dt (f(Y_t)/eta + lambda) + Z dW.

    Stochastic data: regression t-tests of r and of r dW/dt on the state at
    each probe node, |t| <= t_max. Deterministic data: |r| <= det_tol
    relative to max(1, |Y_{t+dt}|) at every node.
    """
    if solution.kind != "Y":
        raise ConfigError("residual check applies to Y-type solutions")
    rule = rule or solution.meta.get("step", "flow")
    Y, Z = solution.values, solution.z_values
    grid = ensemble.grid
    n_steps = Y.shape[1] - 1
    deterministic = model.deterministic or Y.shape[0] == 1
    if probes is None:
        probes = np.unique(np.linspace(0, n_steps - 1, n_probes).astype(int)) \
            if not deterministic else np.arange(n_steps)
    rep = VerificationReport(environment={"scheme": solution.scheme, "rule": rule,
                                          "paths": int(Y.shape[0])})
    worst_t, worst_node, stats = 0.0, None, []
    det_excess = []
    for k in probes:
        dt = grid.steps[k]
        g = ensemble.gamma[:, k] if ensemble.n_paths == Y.shape[0] else \
            np.full(Y.shape[0], ensemble.gamma[0, k])
        lam = model.lam_at(grid.nodes[k], g)
        back = _inverse_step(spec, Y[:, k].copy(), dt, 1.0 / g, lam, rule)
        dw = ensemble.dw[:, k] if ensemble.n_paths == Y.shape[0] else np.zeros(Y.shape[0])
        r = back - Y[:, k + 1] + Z[:, k] * dw
        if deterministic:
            det_excess.append(np.max(np.abs(r) / np.maximum(1.0, np.abs(Y[:, k + 1]))) - det_tol)
            continue
        floor = ROUNDING * max(1.0, float(np.mean(np.abs(Y[:, k + 1]))))
        t1 = _tstat(r, g, basis, floor)
        t2 = _tstat(r * dw / dt, g, basis, floor / math.sqrt(dt))
        stats.append({"node": int(k), "t": float(grid.nodes[k]), "t_mean": t1, "t_dw": t2})
        if max(t1, t2) > worst_t:
            worst_t, worst_node = max(t1, t2), int(k)
    if deterministic:
        rep.add(_count(np.array(det_excess), "residual_deterministic",
                       "one-step residual vanishes", f"{det_tol:g} relative", 0))
    else:
        excess = np.array([max(s["t_mean"], s["t_dw"]) - t_max for s in stats])
        rep.add(_count(excess, "residual_tstat",
                       "conditional means of r and r dW/dt are statistically zero",
                       f"|t| <= {t_max:g}", 0,
                       {"worst_t": worst_t, "worst_node": worst_node, "probes": stats}))
    return rep


# diagnostics


def zy_diagnostic(solution: BsdeSolution, spec) -> dict:
    """Per-path int (-f'(Y)/f(Y)^2) (Z^Y)^2 ds; returns its mean and standard error."""
    Y, Z = solution.values, solution.z_values
    steps = solution.grid.steps[:Z.shape[1]]
    y = Y[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = -spec.df(y) / spec.f(y) ** 2
    vals = np.sum(np.where(np.isfinite(w), w, 0.0) * Z ** 2 * steps[None, :], axis=1)
    m = vals.size
    return {"mean": float(vals.mean()),
            "stderr": float(vals.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0}


def check_agreement(reps_a: np.ndarray, reps_b: np.ndarray, nodes, times=None,
                    n_sigma: float = 3.0) -> VerificationReport:
    """Compare node means of two solvers replicated over independent seeds.

    reps_* have shape (replications, nodes): each row is the path average
    of one replication. The combined standard error of the difference of
    grand means is sqrt(var_a/R_a + var_b/R_b) with variances across rows.
    """
    a = np.asarray(reps_a, float)[:, nodes]
    b = np.asarray(reps_b, float)[:, nodes]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigError("agreement check needs at least two replications per solver")
    diff = a.mean(axis=0) - b.mean(axis=0)
    se = np.sqrt(a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(diff) / se, np.where(diff == 0, 0.0, np.inf))
    rep = VerificationReport()
    rep.add(_count(z - n_sigma, "cross_solver_agreement",
                   "node means of the two solvers agree", f"{n_sigma:g} combined standard errors",
                   0, {"nodes": list(map(int, np.atleast_1d(nodes))),
                       "times": None if times is None else list(map(float, times)),
                       "difference": diff.tolist(), "stderr": se.tolist(), "z": z.tolist()}))
    return rep
