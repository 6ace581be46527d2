"""Optimal liquidation driven by the BSDE solution.

Cost of a strategy X with X_0 = x0, X_T = 0:
    J = int_0^T [(p-1) eta_t]^{p-1} |X'_t|^p + lambda_t |X_t|^p dt,
with value Y_0 |x0|^p and optimal feedback X' = -X Y^q / ((p-1) eta),
q = 1/(p-1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridTooCoarse, ShapeMismatch
from .forward import ForwardModel, PathEnsemble, TimeGrid
from .solvers import BsdeSolution


@dataclass(frozen=True)
class LiquidationProblem:
    p: float
    x0: float
    model: ForwardModel

    def __post_init__(self):
        if not self.p > 1:
            raise ConfigError("cost exponent p must exceed 1")
        if not math.isfinite(self.x0):
            raise ConfigError("initial position must be finite")
        if abs(1.0 / self.p + 1.0 / (self.q + 1.0) - 1.0) > 1e-12:
            raise ConfigError("p and q + 1 are not conjugate")

    @property
    def q(self) -> float:
        return 1.0 / (self.p - 1.0)

    @property
    def horizon(self) -> float:
        return self.model.horizon

    def impact_weight(self, eta):
        return ((self.p - 1.0) * np.asarray(eta, float)) ** (self.p - 1.0)


@dataclass
class StrategyPath:
    """Positions on nodes 0..K, rates on steps 0..K-1 and a final block
    trade over [t_K, T] at constant speed."""

    grid: TimeGrid
    X: np.ndarray
    rate: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    cost: np.ndarray = field(default=None)
    running_cost: np.ndarray = field(default=None)
    block_cost: np.ndarray = field(default=None)
    label: str = "feedback"

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def summary(self) -> dict:
        m = self.n_paths
        se = float(self.cost.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
        return {"strategy": self.label, "paths": m, "mean_cost": float(self.cost.mean()),
                "stderr": se, "mean_block_cost": float(self.block_cost.mean()),
                "max_final_position": float(np.max(np.abs(self.X[:, -1])))}


def _eta_lam(problem: LiquidationProblem, grid: TimeGrid, n_nodes: int, n_paths: int,
             ensemble: PathEnsemble | None):
    nodes = grid.nodes[:n_nodes]
    if ensemble is not None:
        gamma = ensemble.gamma[:, :n_nodes]
    else:
        if not problem.model.deterministic:
            raise ConfigError("a stochastic model needs the ensemble")
        gamma = np.full((n_paths, n_nodes), problem.model.gamma0)
    lam = problem.model.lam_at(nodes[None, :], gamma)
    return 1.0 / gamma, lam


def evaluate_cost(problem: LiquidationProblem, strategy: StrategyPath) -> dict:
    """Per-path cost: rate part with piecewise-constant speeds, inventory part
    by the trapezoid rule, plus the final block over [t_K, T]. Fills the
    cost fields of ``strategy`` and returns its summary."""
    p = problem.p
    X, v = strategy.X, strategy.rate
    K = X.shape[1] - 1
    nodes = strategy.grid.nodes
    dt = np.diff(nodes[:K + 1])
    w = problem.impact_weight(strategy.eta[:, :K])
    inv = strategy.lam[:, :K + 1] * np.abs(X) ** p
    running = np.sum(w * np.abs(v) ** p * dt[None, :], axis=1) \
        + np.sum(0.5 * (inv[:, 1:] + inv[:, :-1]) * dt[None, :], axis=1)
    tail = strategy.grid.horizon - nodes[K]
    xK = X[:, K]
    if tail > 0:
        speed = np.abs(xK) / tail
        block = problem.impact_weight(strategy.eta[:, K]) * speed ** p * tail \
            + strategy.lam[:, K] * np.abs(xK) ** p * tail / (p + 1)
    else:
        block = np.where(np.abs(xK) <= 1e-12 * max(1.0, abs(problem.x0)), 0.0, np.inf)
    strategy.running_cost = running
    strategy.block_cost = block
    strategy.cost = running + block
    return strategy.summary()


def feedback_strategy(problem: LiquidationProblem, Y: BsdeSolution,
                      ensemble: PathEnsemble | None = None) -> StrategyPath:
    """Explicit Euler for X' = -X Y^q/((p-1) eta) on the nodes where Y is given,
    then a block trade to zero over the remaining time."""
    vals = Y.values
    m = vals.shape[0] if ensemble is None else ensemble.n_paths
    if ensemble is not None and vals.shape[0] not in (1, m):
        raise ShapeMismatch(f"Y has {vals.shape[0]} paths, ensemble {m}")
    K = vals.shape[1] - 1
    Yv = np.broadcast_to(vals, (m, K + 1))
    eta, lam = _eta_lam(problem, Y.grid, K + 1, m, ensemble)
    dt = Y.grid.steps[:K]
    X = np.empty((m, K + 1))
    rate = np.empty((m, K))
    X[:, 0] = problem.x0
    q = problem.q
    for k in range(K):
        rate[:, k] = -X[:, k] * np.abs(Yv[:, k]) ** q / ((problem.p - 1.0) * eta[:, k])
        X[:, k + 1] = X[:, k] + rate[:, k] * dt[k]
    strat = StrategyPath(Y.grid, X, rate, eta, lam, label="feedback")
    evaluate_cost(problem, strat)
    return strat


def twap(problem: LiquidationProblem, grid: TimeGrid,
         ensemble: PathEnsemble | None = None, n_paths: int = 1) -> StrategyPath:
    """Constant speed x0/T on the whole grid."""
    m = ensemble.n_paths if ensemble is not None else n_paths
    n = grid.nodes.size
    eta, lam = _eta_lam(problem, grid, n, m, ensemble)
    T = grid.horizon
    X = np.broadcast_to(problem.x0 * (1.0 - grid.nodes / T), (m, n)).copy()
    rate = np.full((m, n - 1), -problem.x0 / T)
    strat = StrategyPath(grid, X, rate, eta, lam, label="twap")
    evaluate_cost(problem, strat)
    return strat


# dynamic programming oracle


@dataclass
class DpResult:
    value: float
    positions: np.ndarray
    times: np.ndarray
    path: np.ndarray
    value_table: np.ndarray

    def value_at(self, x: float) -> float:
        """V(0, x) for a position on the grid."""
        i = int(np.argmin(np.abs(self.positions - x)))
        if abs(self.positions[i] - x) > 1e-9 * max(1.0, abs(x)):
            raise ConfigError(f"position {x} is not on the DP grid")
        return float(self.value_table[0, i])


def dp_oracle(problem: LiquidationProblem, n_time: int = 200, n_x: int = 200,
              x_max: float | None = None) -> DpResult:
    """Backward DP on a (time, position) grid with moves between grid positions.

    Uniform time steps; V_N vanishes only at x = 0. The cost of a move
    x_i -> x_j over one step is the impact term at speed (x_i - x_j)/dt
    plus the trapezoid of lambda |x|^p. Positions span [0, x_max] with
    n_x cells; x0 must be a grid point.
    """
    model = problem.model
    if not model.deterministic:
        raise ConfigError("the DP oracle needs a deterministic model")
    x0 = abs(problem.x0)
    x_max = x0 if x_max is None else float(x_max)
    if x0 > x_max * (1 + 1e-12):
        raise GridTooCoarse("x0 lies above the position grid")
    T = model.horizon
    dt = T / n_time
    times = np.linspace(0.0, T, n_time + 1)
    xs = np.linspace(0.0, x_max, n_x + 1)
    i0 = int(np.argmin(np.abs(xs - x0)))
    if abs(xs[i0] - x0) > 1e-9 * max(1.0, x0):
        raise ConfigError("x0 must be a grid point of the position grid")
    p = problem.p
    eta = 1.0 / model.gamma0
    w = float(problem.impact_weight(eta))
    V = np.full((n_time + 1, n_x + 1), np.inf)
    V[-1, 0] = 0.0
    choice = np.zeros((n_time, n_x + 1), dtype=int)
    move = np.abs(xs[:, None] - xs[None, :]) / dt
    impact = w * move ** p * dt
    xp = np.abs(xs) ** p
    for k in range(n_time - 1, -1, -1):
        lam = float(model.lam_at(times[k], np.array([model.gamma0]))[0])
        lam1 = float(model.lam_at(times[k + 1], np.array([model.gamma0]))[0])
        step = impact + 0.5 * dt * (lam * xp[:, None] + lam1 * xp[None, :])
        total = step + V[k + 1][None, :]
        choice[k] = np.argmin(total, axis=1)
        V[k] = total[np.arange(n_x + 1), choice[k]]
    path = np.empty(n_time + 1, dtype=int)
    path[0] = i0
    for k in range(n_time):
        path[k + 1] = choice[k, path[k]]
    if not np.isfinite(V[0, i0]):
        raise GridTooCoarse("no finite-cost path to zero on the grid")
    if n_x > 0 and np.any(path[1:] == n_x) and x_max > 0:
        raise GridTooCoarse("greedy path runs along the upper edge of the position grid")
    return DpResult(float(V[0, i0]), xs, times, xs[path] * np.sign(problem.x0 or 1.0), V)


# exports


def write_costs_csv(path, strategies: list[StrategyPath]) -> None:
    """One row per path with the cost of each strategy, then mean and stderr rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path"] + [s.label for s in strategies])
        m = strategies[0].n_paths
        for i in range(m):
            w.writerow([i] + ["%.12g" % s.cost[i] for s in strategies])
        w.writerow(["mean"] + ["%.12g" % s.summary()["mean_cost"] for s in strategies])
        w.writerow(["stderr"] + ["%.12g" % s.summary()["stderr"] for s in strategies])


def summary_json(problem: LiquidationProblem, strategies: list[StrategyPath],
                 extra: dict | None = None) -> str:
    out = {"schema_version": "1", "p": problem.p, "q": problem.q, "x0": problem.x0,
           "strategies": [s.summary() for s in strategies]}
    out.update(extra or {})
    return json.dumps(out, indent=2)
