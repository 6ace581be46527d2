import json
import math

import numpy as np
import pytest

from singular_bsde.drivers import DriverSpec, companions
from singular_bsde.forward import ForwardModel, TimeGrid, compute_A, simulate
from singular_bsde.solvers import (BsdeSolution, GeneratorBundle, solve_ode, solve_penalized,
                                   solve_picard_sharp)
from singular_bsde.verify import (SCHEMA_VERSION, check_agreement, check_bounds,
                                  check_generator_identities, check_H_bounds, check_residuals,
                                  singularity_witness, zy_diagnostic)

P1 = DriverSpec.power(1.0)


@pytest.fixture(scope="module")
def stochastic():
    model = ForwardModel.drifted(1.0, 0.0, 0.1, 0.5, 2.0, lam=0.5)
    ens = simulate(model, TimeGrid.refined(1.0, 100), 4000, 23)
    A = compute_A(model, ens)
    return model, ens, A, solve_penalized(P1, model, ens, 1000.0)


def _scaled(sol, factor, mask=None):
    vals = sol.values.copy()
    if mask is None:
        vals *= factor
    else:
        vals[:, mask] *= factor
    return BsdeSolution(sol.grid, vals, sol.z_values, sol.scheme + "-scaled", meta=sol.meta)


def test_deterministic_bounds_exact():
    grid = TimeGrid.refined(1.0, 200)
    Y = solve_ode(P1, 1.0, 0.0, grid)
    rep = check_bounds(Y, grid.time_to_go[None, :], companions(P1, 1.0, 0.0))
    assert rep.passed
    assert all(c.violations == 0 for c in rep.checks)
    assert rep.get("sandwich").details["C_eta"] == pytest.approx(0.0, abs=1e-12)


def test_upper_bound_negative_control():
    grid = TimeGrid.refined(1.0, 200)
    Y = solve_ode(P1, 1.0, 0.0, grid)
    bad = _scaled(Y, 1.5, Y.times >= 0.75)
    rep = check_bounds(bad, grid.time_to_go[None, :], companions(P1, 1.0, 0.0))
    assert not rep.get("upper_bound").passed


def test_lower_bound_negative_control(stochastic):
    model, ens, A, Y = stochastic
    rep = check_bounds(_scaled(Y, 0.5), A, companions(P1, 2.0, 0.5), max_rate=0.01)
    assert not rep.get("lower_bound").passed


def test_penalized_residuals_pass(stochastic):
    model, ens, A, Y = stochastic
    rep = check_residuals(Y, P1, model, ens)
    assert rep.passed, rep.to_json()


def test_shuffled_Z_fails_residuals(stochastic):
    model, ens, A, Y = stochastic
    perm = np.random.default_rng(0).permutation(Y.z_values.shape[0])
    bad = BsdeSolution(Y.grid, Y.values, Y.z_values[perm], Y.scheme, meta=Y.meta)
    assert not check_residuals(bad, P1, model, ens).passed


def test_zero_Z_fails_residuals(stochastic):
    model, ens, A, Y = stochastic
    bad = BsdeSolution(Y.grid, Y.values, np.zeros_like(Y.z_values), Y.scheme, meta=Y.meta)
    assert not check_residuals(bad, P1, model, ens).passed


def test_deterministic_residuals():
    model = ForwardModel.constant(1.0, lam=1.0)
    ens = simulate(model, TimeGrid.uniform(1.0, 200), 1, 0)
    Y = solve_penalized(P1, model, ens, 50.0)
    assert check_residuals(Y, P1, model, ens).passed
    bad = _scaled(Y, 1.001)
    assert not check_residuals(bad, P1, model, ens).passed


def test_zy_diagnostic_runs(stochastic):
    d = zy_diagnostic(stochastic[3], P1)
    assert all(np.isfinite(v) for v in d.values() if isinstance(v, float))


def test_H_envelope_fault_injection():
    model = ForwardModel.constant(1.0, lam=1.0)
    ens = simulate(model, TimeGrid.uniform(1.0, 500), 1, 0)
    H = solve_picard_sharp(P1, model, ens)
    comp = companions(P1, 1.0, 1.0)
    assert check_H_bounds(H, "sharp", comp, R=2.0).passed
    big = BsdeSolution(H.grid, H.values * 10, H.z_values, "x10", "H")
    assert not check_H_bounds(big, "sharp", comp, R=2.0).passed
    neg = BsdeSolution(H.grid, -H.values - 1e-3, H.z_values, "negated", "H")
    assert not check_H_bounds(neg, "sharp", comp, R=2.0).get("nonnegative").passed


def test_generator_identities():
    model = ForwardModel.drifted(1.0, 0.0, 0.1, 0.5, 2.0, lam=0.5)
    rep = check_generator_identities(GeneratorBundle(P1, model), companions(P1, 2.0, 0.5))
    assert rep.passed, rep.to_json()


def test_singularity_witness_growth():
    w = singularity_witness(P1, ForwardModel.constant(1.0), (1e-2, 1e-3, 1e-4))
    vals = [w[e] for e in (1e-2, 1e-3, 1e-4)]
    # kappa1/(eta A) = 2/(T - t): each decade adds about 2 ln 10
    assert all(g >= 0.9 * math.log(10) for g in np.diff(vals))
    assert np.diff(vals) == pytest.approx([2 * math.log(10)] * 2, rel=0.05)


def test_agreement_identical_and_shifted():
    rng = np.random.default_rng(1)
    a = 1.0 + rng.normal(0, 1e-3, (4, 20))
    b = 1.0 + rng.normal(0, 1e-3, (4, 20))
    nodes = np.arange(0, 20, 2)
    assert check_agreement(a, b, nodes).passed
    assert not check_agreement(a, b + 0.01, nodes).passed


def test_report_json_schema():
    grid = TimeGrid.uniform(1.0, 10)
    Y = solve_ode(P1, 1.0, 0.0, grid)
    d = json.loads(check_bounds(Y, grid.time_to_go[None, :], companions(P1, 1.0)).to_json())
    assert d["schema_version"] == SCHEMA_VERSION
    assert {c["name"] for c in d["checks"]} == {"lower_bound", "upper_bound", "sandwich"}
