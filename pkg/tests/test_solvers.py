import numpy as np
import pytest
from scipy import integrate

from singular_bsde.drivers import DriverSpec, companions, eval_phi
from singular_bsde.errors import ConditionRefused
from singular_bsde.forward import ForwardModel, TimeGrid, compute_A, simulate
from singular_bsde.solvers import (BsdeSolution, GeneratorBundle, assemble_Y, decompose_H,
                                   picard_constants, solve_general_hat, solve_ode,
                                   solve_penalized, solve_picard_sharp)
from singular_bsde.verify import check_bounds, check_H_bounds

P1 = DriverSpec.power(1.0)
UNIFORM = TimeGrid.uniform(1.0, 1000)


@pytest.fixture(scope="module")
def stochastic():
    model = ForwardModel.drifted(1.0, 0.0, 0.1, 0.5, 2.0, lam=0.5)
    grid = TimeGrid.refined(1.0, 100)
    ens = simulate(model, grid, 2000, 17)
    return model, ens, compute_A(model, ens)


# deterministic envelope


def test_ode_reciprocal():
    sol = solve_ode(P1, 1.0, 0.0, UNIFORM)
    assert sol.values[0, 0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sol.values[0], 1 / sol.time_to_go, rtol=1e-12)


def test_ode_lambda_one_is_coth():
    # y' = -1 + y^2 backward from infinity: y = coth(T - t)
    sol = solve_ode(P1, 1.0, 1.0, UNIFORM)
    np.testing.assert_allclose(sol.values[0], 1 / np.tanh(sol.time_to_go), rtol=1e-10)
    assert sol.values[0, 750] == pytest.approx(4.082988165073597, abs=1e-9)


def test_ode_exponential_closed_form():
    sol = solve_ode(DriverSpec.exponential(1.0), 1.0, 0.0, UNIFORM)
    s = sol.time_to_go
    np.testing.assert_allclose(sol.values[0], -np.log(-np.expm1(-s)), rtol=1e-12)


def test_ode_against_generic_integrator():
    # independent check: integrate y' = -(lam + f(y)/eta) backward from the last node
    spec, eta, lam = DriverSpec.power(2.0), 0.7, 0.8
    grid = TimeGrid.uniform(1.0, 100)
    sol = solve_ode(spec, eta, lam, grid)
    t = sol.times
    ivp = integrate.solve_ivp(lambda _, y: -(lam + spec.f(y) / eta), (t[-1], 0.0),
                              [sol.values[0, -1]], method="Radau", rtol=1e-11, atol=1e-12,
                              t_eval=t[::-1])
    np.testing.assert_allclose(ivp.y[0][::-1], sol.values[0], rtol=1e-7)


# penalization


@pytest.mark.parametrize("n", [10.0, 100.0, 1000.0])
def test_penalized_closed_form(n):
    model = ForwardModel.constant(1.0)
    sol = solve_penalized(P1, model, simulate(model, UNIFORM, 1, 0), n)
    np.testing.assert_allclose(sol.values[0], 1 / (sol.time_to_go + 1 / n), atol=5e-3)
    if n == 10.0:
        assert sol.values[0, 0] == pytest.approx(1 / 1.1, abs=5e-3)


def test_penalized_implicit_step_first_order():
    model = ForwardModel.constant(1.0)
    errs = []
    for steps in (100, 200):
        grid = TimeGrid.uniform(1.0, steps)
        sol = solve_penalized(P1, model, simulate(model, grid, 1, 0), 10.0, step="implicit")
        errs.append(np.max(np.abs(sol.values[0] - 1 / (sol.time_to_go + 0.1))))
    assert errs[1] == pytest.approx(errs[0] / 2, rel=0.15)


def test_penalized_monotone_in_n(stochastic):
    model, ens, _ = stochastic
    vals = [solve_penalized(P1, model, ens, n).values for n in (10.0, 100.0, 1000.0)]
    assert np.all(vals[1] >= vals[0] - 1e-9) and np.all(vals[2] >= vals[1] - 1e-9)


def test_penalized_below_envelope(stochastic):
    model, ens, A = stochastic
    sol = solve_penalized(P1, model, ens, 1000.0)
    rep = check_bounds(sol, A, companions(P1, 2.0, 0.5), lower=False, sandwich=False)
    assert rep.passed


# Picard


def test_picard_zero_fixed_point():
    model = ForwardModel.constant(1.0)
    sol = solve_picard_sharp(P1, model, simulate(model, UNIFORM, 1, 0))
    assert np.all(sol.values == 0)
    assert sol.meta["iterations"] == 1


def test_picard_constants_formula():
    c = picard_constants(P1, ForwardModel.constant(1.0, lam=1.0))
    assert c["R"] == pytest.approx(2.0)  # 2 q^{1+1/q} |lambda|
    c2 = picard_constants(DriverSpec.power(2.0), ForwardModel.constant(1.0, lam=0.5))
    assert c2["R"] == pytest.approx(2 * 2 ** 1.5 * 0.5)


def test_picard_stochastic_contracts(stochastic):
    model, ens, _ = stochastic
    H = solve_picard_sharp(P1, model, ens)
    assert H.meta["converged"]
    assert max(H.meta["ratios"]) <= 0.6
    assert check_H_bounds(H, "sharp", companions(P1, 2.0, 0.5), R=H.meta["R"]).passed


def test_picard_refuses_non_power(stochastic):
    model, ens, _ = stochastic
    with pytest.raises(ConditionRefused):
        solve_picard_sharp(DriverSpec.exponential(1.0), model, ens)


# hat scheme


def test_hat_zero_for_constant_eta_without_lambda():
    model = ForwardModel.constant(1.0)
    grid = TimeGrid.refined(1.0, 100)
    H = solve_general_hat(P1, model, simulate(model, grid, 1, 0))
    np.testing.assert_allclose(H.values, 0.0, atol=1e-14)


def test_hat_bounds_and_regularized_monotone(stochastic):
    model, ens, A = stochastic
    comp = companions(P1, 2.0, 0.5)
    H = solve_general_hat(P1, model, ens, A=A)
    assert check_H_bounds(H, "hat", comp).passed
    fam = [solve_general_hat(P1, model, ens, regularization=(0.0, e), A=A).values
           for e in (1e-3, 1e-2, 1e-1)]
    assert np.all(fam[0] >= fam[1] - 1e-10) and np.all(fam[1] >= fam[2] - 1e-10)


def test_hat_refuses_logpower(stochastic):
    model, ens, _ = stochastic
    with pytest.raises(ConditionRefused):
        solve_general_hat(DriverSpec.logpower(2.0), model, ens)


# assembly


def test_zero_remainder_gives_phi_of_A(stochastic):
    model, ens, A = stochastic
    H = BsdeSolution(ens.grid, np.zeros_like(A), np.zeros((A.shape[0], A.shape[1] - 1)), "zero",
                     "H")
    Y = assemble_Y(P1, A, H, "symmetric")
    k = Y.n_nodes
    np.testing.assert_allclose(Y.values, eval_phi(P1, A[:, :k]), rtol=1e-15)


def test_sharp_and_symmetric_coincide_for_constant_eta():
    model = ForwardModel.constant(1.0, lam=1.0)
    ens = simulate(model, UNIFORM, 1, 0)
    A = compute_A(model, ens)
    H = solve_picard_sharp(P1, model, ens, tol=1e-12)
    Ys = assemble_Y(P1, A, H, "sharp", ensemble=ens)
    Ysym = assemble_Y(P1, A, H, "symmetric")
    np.testing.assert_allclose(Ys.values, Ysym.values, rtol=1e-13)
    np.testing.assert_allclose(Ys.values[0, :-1], 1 / np.tanh(Ys.time_to_go[:-1]), rtol=1e-5)


@pytest.mark.parametrize("mode", ["symmetric", "sharp", "hat"])
def test_decompose_inverts_assemble(stochastic, mode):
    model, ens, A = stochastic
    rng = np.random.default_rng(0)
    H = BsdeSolution(ens.grid, rng.uniform(0, 0.1, A.shape), np.zeros((A.shape[0], A.shape[1] - 1)),
                     "random", "H")
    Y = assemble_Y(P1, A, H, mode, gamma=ens.gamma, eta_cap=2.0)
    back = decompose_H(P1, A, Y, mode, gamma=ens.gamma, eta_cap=2.0)
    pos = Y.time_to_go > 0
    np.testing.assert_allclose(back.values[:, pos], H.values[:, :Y.n_nodes][:, pos], atol=1e-12)


# generators


def test_F_vanishes_at_zero_and_is_nonpositive():
    b = GeneratorBundle(DriverSpec.power(2.0), ForwardModel.constant(1.0))
    A = np.linspace(0.01, 1, 50)
    assert np.all(b.F(np.ones(50), A, np.zeros(50)) == 0)
    assert np.all(b.F(np.ones(50), A, np.full(50, 0.3)) <= 0)


def test_sharp_generator_matches_direct_formula():
    # q = 1, eta = 1: F_sharp(s, h) = lambda s^2 - h^2/s^2
    b = GeneratorBundle(P1, ForwardModel.constant(1.0, lam=1.0))
    s, h = 0.3, np.array([0.0, 0.01, 0.05])
    np.testing.assert_allclose(b.F_sharp(s, np.ones(3), h, 1.0, 0.0), s * s - h * h / (s * s),
                               rtol=1e-12)


# serialization


def test_solution_roundtrip_and_csv(tmp_path):
    sol = solve_ode(P1, 1.0, 0.0, TimeGrid.uniform(1.0, 10))
    sol.save(tmp_path / "y.npz")
    back = BsdeSolution.load(tmp_path / "y.npz")
    np.testing.assert_array_equal(back.values, sol.values)
    assert back.scheme == "ode"
    sol.write_csv(tmp_path / "y.csv")
    head = (tmp_path / "y.csv").read_text().splitlines()
    assert head[0] == "t,time_to_go,mean,stderr,p05,p25,p50,p75,p95"
    assert head[1].split(",")[2] == "1"
