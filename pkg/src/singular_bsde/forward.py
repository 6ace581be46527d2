"""Forward side: the impact process gamma = 1/eta, time grids and the clock A.

A_t = E[int_t^T gamma_s ds | F_t] is the conditional remaining inverse
impact. Its band (T-t)/eta_cap <= A_t <= (T-t)/eta_floor follows from the
bounds on eta, and Z^A is the dW-loading of A in dA = -gamma dt + Z^A dW.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ConfigError
from .lsmc import BasisSpec, fit_conditional

Coefficient = Union[float, Callable, dict]
MODEL_KINDS = ("constant", "drifted", "sde")


def _coefficient(c: Coefficient, t, g) -> np.ndarray:
    """Evaluate a coefficient given as a number, a callable of (t, gamma), or a
    mean-reversion block {"mean_reversion": k, "level": m} meaning k (m - gamma)."""
    g = np.asarray(g, dtype=float)
    if callable(c):
        return np.broadcast_to(np.asarray(c(t, g), dtype=float), g.shape).astype(float)
    if isinstance(c, dict):
        return float(c["mean_reversion"]) * (float(c["level"]) - g)
    return np.full(g.shape, float(c))


@dataclass(frozen=True)
class ForwardModel:
    """Dynamics of gamma = 1/eta with floor/cap eta_floor <= eta <= eta_cap.

    kinds: ``constant`` (eta fixed), ``drifted`` (d gamma = b dt + sigma dW
    with b, sigma numbers or bounded callables of (t, gamma)) and ``sde``
    (Lipschitz callables of (t, gamma)). Both stochastic kinds are
    simulated the same way.
    """

    kind: str
    horizon: float
    eta_floor: float
    eta_cap: float
    gamma0: float
    drift: Coefficient = 0.0
    vol: Coefficient = 0.0
    lam: Coefficient = 0.0
    signed_lambda: bool = False
    dim: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if not 0 < self.eta_floor <= self.eta_cap:
            raise ConfigError(f"need 0 < eta_floor <= eta_cap, got {self.eta_floor}, {self.eta_cap}")
        lo, hi = 1.0 / self.eta_cap, 1.0 / self.eta_floor
        if not lo * (1 - 1e-12) <= self.gamma0 <= hi * (1 + 1e-12):
            raise ConfigError(f"gamma0 = {self.gamma0} outside [{lo}, {hi}]")
        if self.dim < 1:
            raise ConfigError("Brownian dimension must be >= 1")
        if not self.signed_lambda and not callable(self.lam) and not isinstance(self.lam, dict) \
                and float(self.lam) < 0:
            raise ConfigError("lambda must be nonnegative unless signed_lambda is set")
        if self.kind == "sde" and not (callable(self.drift) or isinstance(self.drift, dict)):
            # an sde model with constant coefficients is a drifted model
            pass

    @classmethod
    def constant(cls, eta: float, lam: Coefficient = 0.0, horizon: float = 1.0,
                 signed_lambda: bool = False) -> "ForwardModel":
        return cls("constant", float(horizon), float(eta), float(eta), 1.0 / float(eta),
                   lam=lam, signed_lambda=signed_lambda)

    @classmethod
    def drifted(cls, gamma0: float, drift: Coefficient, vol: Coefficient, eta_floor: float,
                eta_cap: float, lam: Coefficient = 0.0, horizon: float = 1.0,
                signed_lambda: bool = False, dim: int = 1) -> "ForwardModel":
        return cls("drifted", float(horizon), float(eta_floor), float(eta_cap), float(gamma0),
                   drift, vol, lam, signed_lambda, dim)

    @classmethod
    def sde(cls, gamma0: float, drift: Coefficient, vol: Coefficient, eta_floor: float,
            eta_cap: float, lam: Coefficient = 0.0, horizon: float = 1.0,
            signed_lambda: bool = False, dim: int = 1) -> "ForwardModel":
        return cls("sde", float(horizon), float(eta_floor), float(eta_cap), float(gamma0),
                   drift, vol, lam, signed_lambda, dim)

    # coefficients

    @property
    def gamma_range(self) -> tuple[float, float]:
        return 1.0 / self.eta_cap, 1.0 / self.eta_floor

    @property
    def deterministic(self) -> bool:
        if self.kind == "constant":
            return True
        return not callable(self.vol) and not isinstance(self.vol, dict) and float(self.vol) == 0.0

    @property
    def constant_drift(self) -> bool:
        return self.kind == "constant" or not (callable(self.drift) or isinstance(self.drift, dict))

    @property
    def constant_coefficients(self) -> bool:
        return self.constant_drift and (self.kind == "constant" or not (
            callable(self.vol) or isinstance(self.vol, dict)))

    def b(self, t, g) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros(np.shape(g))
        return _coefficient(self.drift, t, g)

    def sigma(self, t, g) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros(np.shape(g))
        return _coefficient(self.vol, t, g)

    def lam_at(self, t, g) -> np.ndarray:
        return _coefficient(self.lam, t, g)

    def b_zeta(self, t, g, q: float) -> np.ndarray:
        """Drift of zeta = eta^{1/q} = gamma^{-1/q} by Ito's rule."""
        g = np.asarray(g, dtype=float)
        a = 1.0 / q
        b, s = self.b(t, g), self.sigma(t, g)
        return -a * g ** (-a - 1) * b + 0.5 * a * (a + 1) * g ** (-a - 2) * s * s

    def _sup_over_states(self, fn, n_t: int = 21, n_g: int = 101) -> float:
        lo, hi = self.gamma_range
        ts = np.linspace(0.0, self.horizon, n_t)[:, None]
        gs = np.linspace(lo, hi, n_g)[None, :]
        return float(np.max(np.abs(fn(ts, np.broadcast_to(gs, (n_t, n_g))))))

    def lambda_norm(self) -> float:
        return self._sup_over_states(self.lam_at)

    def b_zeta_norm(self, q: float) -> float:
        return self._sup_over_states(lambda t, g: self.b_zeta(t, g, q))

    # serialization

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "horizon": self.horizon}
        for name in ("drift", "vol", "lam"):
            val = getattr(self, name)
            if callable(val):
                raise ConfigError(f"model {name} is a callable and cannot be serialized")
            out[name] = dict(val) if isinstance(val, dict) else float(val)
        if self.kind == "constant":
            out["eta"] = self.eta_floor
            out.pop("drift")
            out.pop("vol")
        else:
            out.update(gamma0=self.gamma0, eta_floor=self.eta_floor, eta_cap=self.eta_cap)
        out["signed_lambda"] = self.signed_lambda
        out["dim"] = self.dim
        return out

    @classmethod
    def from_dict(cls, block: dict) -> "ForwardModel":
        block = dict(block)
        kind = str(block.pop("kind", "")).lower()
        try:
            if kind == "constant":
                known = {"eta", "lam", "horizon", "signed_lambda", "dim"}
                _reject_unknown(block, known)
                return cls.constant(block["eta"], _coef(block.get("lam", 0.0)),
                                    block.get("horizon", 1.0), bool(block.get("signed_lambda", False)))
            if kind in ("drifted", "sde"):
                known = {"gamma0", "drift", "vol", "eta_floor", "eta_cap", "lam", "horizon",
                         "signed_lambda", "dim"}
                _reject_unknown(block, known)
                ctor = cls.drifted if kind == "drifted" else cls.sde
                return ctor(block["gamma0"], _coef(block.get("drift", 0.0)),
                            _coef(block.get("vol", 0.0)), block["eta_floor"], block["eta_cap"],
                            _coef(block.get("lam", 0.0)), block.get("horizon", 1.0),
                            bool(block.get("signed_lambda", False)), int(block.get("dim", 1)))
        except KeyError as exc:
            raise ConfigError(f"model block is missing {exc}") from exc
        raise ConfigError(f"unknown model kind {kind!r}")


def _reject_unknown(block: dict, known: set):
    extra = set(block) - known
    if extra:
        raise ConfigError(f"unknown model fields {sorted(extra)}")


def _coef(val) -> Coefficient:
    if isinstance(val, dict):
        if set(val) != {"mean_reversion", "level"}:
            raise ConfigError("coefficient blocks need exactly mean_reversion and level")
        return {"mean_reversion": float(val["mean_reversion"]), "level": float(val["level"])}
    return float(val)


# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Increasing nodes from 0 to the horizon T (T itself is the last node).

    Y-type solvers stop at ``cutoff_index``, the last node with
    t <= T - eps_cut; H-type solvers run up to T where H vanishes.
    """

    nodes: np.ndarray
    eps_cut: float = 0.0
    ratio: float = 1.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ConfigError("grid nodes must start at 0 and increase strictly")
        if not 0 <= self.eps_cut < nodes[-1]:
            raise ConfigError("eps_cut must lie in [0, T)")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def time_to_go(self) -> np.ndarray:
        return self.horizon - self.nodes

    @property
    def cutoff_index(self) -> int:
        T = self.horizon
        return int(np.searchsorted(self.nodes, T - self.eps_cut + 1e-12 * T, side="right") - 1)

    def tail_share(self, tail: float = 0.1) -> float:
        """Fraction of nodes in the last ``tail`` fraction of [0, T]."""
        return float(np.mean(self.nodes > (1 - tail) * self.horizon))

    @classmethod
    def uniform(cls, horizon: float, n_steps: int, eps_cut: float = 0.0) -> "TimeGrid":
        nodes = np.linspace(0.0, horizon, n_steps + 1)
        return cls(nodes, eps_cut, 1.0)

    @classmethod
    def refined(cls, horizon: float, n_steps: int = 200, eps_cut: float | None = None,
                ratio: float = 0.8, tail: float = 0.1, min_tail_share: float = 0.25) -> "TimeGrid":
        """Uniform step T/n_steps on [0, (1-tail)T], then geometric intervals of
        ratio ``ratio`` in the time to go, down to eps_cut, each split into equal
        substeps so the last ``tail`` of the horizon holds >= min_tail_share of nodes."""
        T = float(horizon)
        eps = 1e-3 * T if eps_cut is None else float(eps_cut)
        if not 0 < eps < tail * T:
            raise ConfigError("refined grid needs 0 < eps_cut < tail * T")
        if not 0 < ratio < 1:
            raise ConfigError("refinement ratio must lie in (0, 1)")
        h = T / n_steps
        n_uniform = max(int(round((1 - tail) * n_steps)), 1)
        uniform = np.linspace(0.0, (1 - tail) * T, n_uniform + 1)
        breaks = [tail * T]
        while breaks[-1] * ratio > eps * (1 + 1e-9):
            breaks.append(breaks[-1] * ratio)
        breaks.append(eps)
        breaks = np.array(breaks)
        sub = max(1, math.ceil((breaks[0] - breaks[1]) / h - 1e-9))
        while True:
            pieces = [np.linspace(a, b, sub + 1)[1:] for a, b in zip(breaks[:-1], breaks[1:])]
            to_go = np.concatenate(pieces)
            nodes = np.concatenate([uniform, T - to_go, [T]])
            if np.mean(nodes > (1 - tail) * T) >= min_tail_share:
                break
            sub += 1
        return cls(nodes, eps, ratio)

    def to_dict(self) -> dict:
        return {"nodes": int(self.nodes.size), "horizon": self.horizon, "eps_cut": self.eps_cut,
                "ratio": self.ratio}


# path ensembles


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated gamma paths and Brownian increments.

    gamma has shape (paths, nodes); dW has shape (paths, steps, dim) and
    ``dw`` is its first component, the one driving gamma.
    """

    grid: TimeGrid
    gamma: np.ndarray
    dW: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.gamma, self.dW):
            arr.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.gamma.shape[0]

    @property
    def dw(self) -> np.ndarray:
        return self.dW[:, :, 0]

    @property
    def eta(self) -> np.ndarray:
        return 1.0 / self.gamma

    def save(self, path) -> None:
        np.savez_compressed(path, nodes=self.grid.nodes, eps_cut=self.grid.eps_cut,
                            ratio=self.grid.ratio, gamma=self.gamma, dW=self.dW,
                            seed=np.uint64(self.seed), meta=json.dumps(self.meta))

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with np.load(path) as data:
            grid = TimeGrid(data["nodes"], float(data["eps_cut"]), float(data["ratio"]))
            return cls(grid, data["gamma"].copy(), data["dW"].copy(), int(data["seed"]),
                       json.loads(str(data["meta"])))

    def write_csv_head(self, path, rows: int = 10) -> None:
        """First ``rows`` paths of gamma, one row per path, for quick inspection."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path"] + [f"t={t:.10g}" for t in self.grid.nodes])
            for i in range(min(rows, self.n_paths)):
                w.writerow([i] + [f"{v:.12g}" for v in self.gamma[i]])


def _path_normals(seed: int, n_paths: int, n_steps: int, dim: int) -> np.ndarray:
    root = np.random.SeedSequence(seed)
    out = np.empty((n_paths, n_steps, dim))
    for i, child in enumerate(root.spawn(n_paths)):
        out[i] = np.random.default_rng(child).standard_normal((n_steps, dim))
    return out


def simulate(model: ForwardModel, grid: TimeGrid, n_paths: int, seed: int) -> PathEnsemble:
    """Euler-Maruyama paths of gamma, projected onto its band after each step.

    Path i draws its normals from the stream spawned for (seed, i), so a
    larger ensemble with the same seed extends a smaller one.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    if abs(grid.horizon - model.horizon) > 1e-12 * model.horizon:
        raise ConfigError("grid horizon differs from model horizon")
    steps = grid.steps
    n = steps.size
    dW = _path_normals(int(seed), n_paths, n, model.dim) * np.sqrt(steps)[None, :, None]
    lo, hi = model.gamma_range
    gamma = np.empty((n_paths, n + 1))
    gamma[:, 0] = model.gamma0
    if model.kind == "constant":
        gamma[:] = model.gamma0
        return PathEnsemble(grid, gamma, dW, int(seed), {"projected": 0})
    projected = 0
    for k in range(n):
        t = grid.nodes[k]
        g = gamma[:, k]
        nxt = g + model.b(t, g) * steps[k] + model.sigma(t, g) * dW[:, k, 0]
        clipped = np.clip(nxt, lo, hi)
        projected += int(np.count_nonzero(clipped != nxt))
        gamma[:, k + 1] = clipped
    return PathEnsemble(grid, gamma, dW, int(seed), {"projected": projected})


# the clock A and its martingale loading


def _remaining_drift_integral(model: ForwardModel, ens: PathEnsemble) -> np.ndarray:
    """Pathwise int_t^T (T-u) b(u, gamma_u) du by the trapezoid rule."""
    nodes = ens.grid.nodes
    T = ens.grid.horizon
    vals = (T - nodes)[None, :] * model.b(nodes[None, :], ens.gamma)
    pieces = 0.5 * (vals[:, 1:] + vals[:, :-1]) * np.diff(nodes)[None, :]
    out = np.zeros_like(vals)
    out[:, :-1] = np.cumsum(pieces[:, ::-1], axis=1)[:, ::-1]
    return out


@dataclass
class AProcess:
    """A along the ensemble, with diagnostics of its band clipping."""

    values: np.ndarray
    conditional_drift: np.ndarray
    band_violations: int
    max_violation: float
    method: str


def compute_A_detailed(model: ForwardModel, ensemble: PathEnsemble,
                       basis: BasisSpec | None = None) -> AProcess:
    nodes = ensemble.grid.nodes
    T = ensemble.grid.horizon
    s = (T - nodes)[None, :]
    if model.kind == "constant":
        cond = np.zeros_like(ensemble.gamma)
        method = "closed-form"
    elif model.constant_drift:
        b = float(model.b(0.0, np.zeros(1))[0])
        cond = np.broadcast_to(0.5 * b * s * s, ensemble.gamma.shape).copy()
        method = "closed-form"
    else:
        realized = _remaining_drift_integral(model, ensemble)
        cond = np.zeros_like(realized)
        for k in range(nodes.size - 1):
            st = ensemble.gamma[:, k]
            cond[:, k] = fit_conditional(realized[:, k], st, basis).predict(st)
        method = "regression"
    raw = ensemble.gamma * s + cond
    lo, hi = s / model.eta_cap, s / model.eta_floor
    tol = 1e-12 * np.maximum(s, 1e-300)
    excess = np.maximum(raw - hi, lo - raw)
    violations = int(np.count_nonzero(excess > tol))
    A = np.clip(raw, lo, hi)
    return AProcess(A, cond, violations, float(max(excess.max(), 0.0)), method)


def compute_A(model: ForwardModel, ensemble: PathEnsemble,
              basis: BasisSpec | None = None) -> np.ndarray:
    """A_t = gamma_t (T-t) + E[int_t^T (T-u) b_u du | F_t], clipped to its band."""
    return compute_A_detailed(model, ensemble, basis).values


def estimate_ZA(model: ForwardModel, ensemble: PathEnsemble, A: AProcess | None = None,
                basis: BasisSpec | None = None) -> np.ndarray:
    """Z^A_t = sigma_t (T-t) + Z of the conditional drift term, per path and node.

    The second part vanishes for constant drift; otherwise it is
    E[C_{t+dt} dW_t | gamma_t]/dt with C the conditional drift term.
    """
    nodes = ensemble.grid.nodes
    s = (ensemble.grid.horizon - nodes)[None, :]
    za = model.sigma(nodes[None, :], ensemble.gamma) * s
    if model.constant_drift:
        return za
    A = A or compute_A_detailed(model, ensemble, basis)
    steps = ensemble.grid.steps
    dw = ensemble.dw
    extra = np.zeros_like(za)
    for k in range(nodes.size - 1):
        st = ensemble.gamma[:, k]
        extra[:, k] = fit_conditional(A.conditional_drift[:, k + 1] * dw[:, k], st,
                                      basis).predict(st) / steps[k]
    return za + extra


def za_diagnostics(ensemble: PathEnsemble, A: np.ndarray, ZA: np.ndarray, t_hat: float,
                   sigmas=(0.5, 1.0, 2.0)) -> dict:
    """Per-path int_{t_hat}^{T-eps} (Z^A/A)^2 ds and E[exp(Sigma * that integral)]."""
    grid = ensemble.grid
    k_end = grid.cutoff_index
    if grid.eps_cut == 0:
        k_end -= 1
    nodes = grid.nodes[:k_end + 1]
    mask = nodes >= t_hat
    ratio = (ZA[:, :k_end + 1] / A[:, :k_end + 1]) ** 2
    steps = np.diff(nodes)
    pieces = 0.5 * (ratio[:, 1:] + ratio[:, :-1]) * steps[None, :]
    integral = (pieces * mask[:-1][None, :]).sum(axis=1)
    moments = {}
    for sig in sigmas:
        e = np.exp(sig * integral)
        moments[str(sig)] = {"mean": float(e.mean()),
                             "stderr": float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else 0.0}
    return {"t_hat": t_hat, "integral_mean": float(integral.mean()),
            "integral_max": float(integral.max()), "exp_moments": moments}
