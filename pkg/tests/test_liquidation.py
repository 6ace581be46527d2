import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from singular_bsde.drivers import DriverSpec
from singular_bsde.errors import ConfigError, GridTooCoarse
from singular_bsde.forward import ForwardModel, TimeGrid, simulate
from singular_bsde.liquidation import (LiquidationProblem, dp_oracle, evaluate_cost,
                                       feedback_strategy, summary_json, twap, write_costs_csv)
from singular_bsde.solvers import solve_ode, solve_penalized

P1 = DriverSpec.power(1.0)
GRID = TimeGrid.uniform(1.0, 1000)


def _feedback(lam=0.0, x0=1.0, p=2.0, grid=GRID):
    model = ForwardModel.constant(1.0, lam=lam)
    problem = LiquidationProblem(p, x0, model)
    Y = solve_ode(DriverSpec.power(problem.q), 1.0, lam, grid)
    return problem, Y, feedback_strategy(problem, Y)


def test_straight_line_liquidation():
    _, Y, fb = _feedback()
    k = fb.X.shape[1]
    np.testing.assert_allclose(fb.X[0], 1.0 - GRID.nodes[:k], atol=1e-12)
    assert fb.cost[0] == pytest.approx(1.0, rel=1e-9)
    assert fb.cost[0] == pytest.approx(Y.values[0, 0] * 1.0 ** 2, rel=1e-9)


def test_zero_position_costs_nothing():
    _, _, fb = _feedback(x0=0.0)
    assert np.all(fb.X == 0) and fb.cost[0] == 0.0


def test_twap_cost_closed_form():
    # constant speed x0/T with lambda: x0^2/T + lambda x0^2 T/3
    for lam in (0.0, 2.0):
        problem = LiquidationProblem(2.0, 1.0, ForwardModel.constant(1.0, lam=lam))
        assert twap(problem, GRID).cost[0] == pytest.approx(1.0 + lam / 3, rel=1e-5)


def test_feedback_value_identity_with_lambda():
    problem, Y, fb = _feedback(lam=2.0)
    r2 = math.sqrt(2)
    assert Y.values[0, 0] == pytest.approx(r2 / math.tanh(r2), rel=1e-10)
    assert fb.cost[0] == pytest.approx(Y.values[0, 0], rel=1e-3)
    assert fb.cost[0] < twap(problem, GRID).cost[0]


@settings(max_examples=10, deadline=None)
@given(p=st.floats(1.5, 4.0), x0=st.floats(0.1, 3.0))
def test_feedback_value_identity_any_p(p, x0):
    problem, Y, fb = _feedback(x0=x0, p=p, grid=TimeGrid.uniform(1.0, 4000))
    target = Y.values[0, 0] * x0 ** p
    assert fb.cost[0] == pytest.approx(target, rel=2e-2)


def test_block_cost_scales_with_cutoff():
    costs = []
    for eps in (1e-2, 1e-3, 1e-4):
        grid = TimeGrid.uniform(1.0, 1000, eps_cut=eps)
        model = ForwardModel.constant(1.0)
        problem = LiquidationProblem(2.0, 1.0, model)
        Y = solve_penalized(P1, model, simulate(model, grid, 1, 0), 1.0 / eps)
        costs.append(feedback_strategy(problem, Y).block_cost[0])
    assert costs[0] > costs[1] > costs[2] > 0


def test_dp_matches_value():
    problem = LiquidationProblem(2.0, 1.0, ForwardModel.constant(1.0))
    dp = dp_oracle(problem, 200, 200)
    assert dp.value == pytest.approx(1.0, rel=0.02)
    # grid doubling moves the value by less than the tolerance
    assert dp_oracle(problem, 400, 400).value == pytest.approx(dp.value, rel=0.02)


def test_dp_homogeneity():
    model = ForwardModel.constant(1.0, lam=1.0)
    dp = dp_oracle(LiquidationProblem(2.0, 2.0, model), 200, 400, x_max=2.0)
    assert dp.value_at(2.0) / dp.value_at(1.0) == pytest.approx(4.0, rel=0.02)


def test_dp_with_lambda_matches_ode():
    problem = LiquidationProblem(2.0, 1.0, ForwardModel.constant(1.0, lam=2.0))
    dp = dp_oracle(problem, 200, 800)
    r2 = math.sqrt(2)
    assert dp.value == pytest.approx(r2 / math.tanh(r2), rel=0.02)


def test_dp_rejects_stochastic_and_off_grid():
    stoch = ForwardModel.drifted(1.0, 0.0, 0.1, 0.5, 2.0)
    with pytest.raises(ConfigError):
        dp_oracle(LiquidationProblem(2.0, 1.0, stoch))
    with pytest.raises(ConfigError):
        dp_oracle(LiquidationProblem(2.0, 1.0, ForwardModel.constant(1.0)), 10, 7, x_max=1.3)
    with pytest.raises(GridTooCoarse):
        dp_oracle(LiquidationProblem(2.0, 2.0, ForwardModel.constant(1.0)), 10, 10, x_max=1.0)


def test_stochastic_feedback_beats_twap():
    model = ForwardModel.drifted(1.0, 0.0, 0.1, 0.5, 2.0, lam=2.0)
    grid = TimeGrid.refined(1.0, 100)
    ens = simulate(model, grid, 2000, 5)
    problem = LiquidationProblem(2.0, 1.0, model)
    fb = feedback_strategy(problem, solve_penalized(P1, model, ens, 1000.0), ens)
    tw = twap(problem, grid, ens)
    diff = tw.cost - fb.cost
    assert diff.mean() >= 3 * diff.std(ddof=1) / math.sqrt(diff.size)


def test_conjugacy_and_costs_csv(tmp_path):
    with pytest.raises(ConfigError):
        LiquidationProblem(1.0, 1.0, ForwardModel.constant(1.0))
    problem, _, fb = _feedback()
    tw = twap(problem, GRID)
    write_costs_csv(tmp_path / "c.csv", [fb, tw])
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "path,feedback,twap"
    assert lines[-2].startswith("mean,") and lines[-1].startswith("stderr,")
    d = __import__("json").loads(summary_json(problem, [fb, tw]))
    assert d["strategies"][0]["strategy"] == "feedback"


def test_leftover_inventory_pays_block_cost():
    problem, _, fb = _feedback()
    fb.X[:, -1] = 0.5
    evaluate_cost(problem, fb)
    tail = 1.0 - GRID.nodes[fb.X.shape[1] - 1]
    # impact (x/tail)^2 * tail, no inventory penalty with lambda = 0
    assert fb.block_cost[0] == pytest.approx(0.25 / tail, rel=1e-12)
