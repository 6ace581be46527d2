import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from singular_bsde.drivers import (DriverSpec, check_conditions, eval_G, eval_G_tilde,
                                   eval_phi, eval_phi_derivs, eval_vartheta, kappa1, kappa2,
                                   lower_level, sampled_monotone, vartheta_curve)
from singular_bsde.errors import ConfigError, DomainError

POWER1 = DriverSpec.power(1.0)
EXP1 = DriverSpec.exponential(1.0)
NORMAL1 = DriverSpec.normal(1.0)


def quad_G(f, x):
    # independent oracle: plain scipy quad on [x, inf)
    val, _ = integrate.quad(lambda t: 1.0 / -f(t), x, np.inf, epsabs=1e-14, epsrel=1e-12)
    return val


def test_G_power_closed_form():
    assert eval_G(POWER1, 2.0) == pytest.approx(0.5, rel=1e-14)


def test_G_exponential_at_log2():
    assert eval_G(EXP1, math.log(2)) == pytest.approx(math.log(2), rel=1e-12)


def test_G_normal_against_quadrature_and_closed_form():
    oracle = quad_G(lambda t: -math.exp(min(t * t, 700.0)), 1.0)
    closed = math.sqrt(math.pi) * (1 - special.ndtr(math.sqrt(2)))
    assert oracle == pytest.approx(closed, rel=1e-10)
    assert eval_G(NORMAL1, 1.0) == pytest.approx(oracle, rel=1e-10)


@pytest.mark.parametrize("spec", [DriverSpec.power(0.5), DriverSpec.power(2.0), EXP1,
                                  DriverSpec.exponential(3.0), NORMAL1])
@pytest.mark.parametrize("x", [0.05, 0.3, 1.0, 4.0])
def test_G_matches_quadrature(spec, x):
    assert eval_G(spec, x) == pytest.approx(quad_G(lambda t: float(spec.f(t)), x), rel=1e-8)


@pytest.mark.parametrize("q", [1.5, 2.0, 3.0])
def test_G_logpower_by_substitution(q):
    # u = log(1 + t) turns the integral into int u^-q du
    for x in (0.05, 1.0, 30.0):
        assert eval_G(DriverSpec.logpower(q), x) == pytest.approx(
            math.log1p(x) ** (1 - q) / (q - 1), rel=1e-12)


def test_custom_driver_uses_quadrature():
    spec = DriverSpec.custom(lambda y: -y ** 3, lambda y: -3 * y ** 2, lambda y: -6 * y)
    assert eval_G(spec, 2.0) == pytest.approx(1 / 8, rel=1e-9)
    assert eval_phi(spec, 1 / 8) == pytest.approx(2.0, rel=1e-8)


def test_phi_examples():
    assert eval_phi(POWER1, 0.5) == pytest.approx(2.0, rel=1e-14)
    assert eval_phi(EXP1, math.log(2)) == pytest.approx(math.log(2), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(y=st.floats(0.01, 50.0), which=st.sampled_from(["p05", "p1", "p3", "exp", "normal", "log"]))
def test_phi_inverts_G(y, which):
    spec = {"p05": DriverSpec.power(0.5), "p1": POWER1, "p3": DriverSpec.power(3.0),
            "exp": EXP1, "normal": NORMAL1, "log": DriverSpec.logpower(2.0)}[which]
    if which == "normal" and y > 20:
        y = y / 5  # G underflows for large y with a Gaussian driver
    assert eval_phi(spec, eval_G(spec, y)) == pytest.approx(y, rel=1e-8)


def test_phi_derivs_for_reciprocal():
    d1, d2, d3 = eval_phi_derivs(POWER1, 0.5)
    assert (d1, d2, d3) == pytest.approx((-4.0, 16.0, -96.0), rel=1e-13)


@pytest.mark.parametrize("spec", [DriverSpec.power(2.0), EXP1, NORMAL1])
def test_phi_second_derivative_by_finite_difference(spec):
    xs = np.geomspace(0.02, 0.8, 25)
    h = 1e-5 * xs
    fd = (eval_phi_derivs(spec, xs + h)[0] - eval_phi_derivs(spec, xs - h)[0]) / (2 * h)
    np.testing.assert_allclose(eval_phi_derivs(spec, xs)[1], fd, rtol=1e-5)


@settings(max_examples=50, deadline=None)
@given(q=st.floats(0.2, 5.0), x=st.floats(1e-6, 10.0))
def test_power_kappas_constant(q, x):
    spec = DriverSpec.power(q)
    assert kappa1(spec, x) == pytest.approx((q + 1) / q, rel=1e-10)
    assert kappa2(spec, x) == pytest.approx((1 + 2 * q) / q, rel=1e-10)


def test_vartheta_without_lambda_is_rescaled_phi():
    assert eval_vartheta(POWER1, 2.0, 0.0, 1.0) == pytest.approx(2.0, rel=1e-14)


def test_vartheta_riccati_closed_form():
    # theta' = 1 + theta^2 in G-time solves to theta(x) = coth(x) for f(y) = -y^2
    xs = np.array([0.05, 0.25, 0.7, 1.5])
    np.testing.assert_allclose([eval_vartheta(POWER1, 1.0, 1.0, x) for x in xs],
                               1 / np.tanh(xs), rtol=1e-10)
    np.testing.assert_allclose(vartheta_curve(POWER1, 1.0, 1.0, xs), 1 / np.tanh(xs), rtol=1e-10)


def test_vartheta_frozen_value():
    # coth(0.25), frozen after the closed-form check above
    assert eval_vartheta(POWER1, 1.0, 1.0, 0.25) == pytest.approx(4.082988165073597, abs=1e-9)


def test_vartheta_solves_envelope_ode():
    spec, eta, lam = DriverSpec.power(2.0), 1.5, 0.7
    xs = np.linspace(0.1, 1.0, 10)
    h = 1e-5
    v = vartheta_curve(spec, eta, lam, xs)
    dv = (vartheta_curve(spec, eta, lam, xs + h) - vartheta_curve(spec, eta, lam, xs - h)) / (2 * h)
    np.testing.assert_allclose(dv, lam + spec.f(v) / eta, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0.0, 3.0), eta=st.floats(0.3, 3.0))
def test_vartheta_decreasing_and_above_phi(lam, eta):
    xs = np.geomspace(1e-3, 2.0, 40)
    v = vartheta_curve(POWER1, eta, lam, xs)
    assert np.all(np.diff(v) < 0)
    assert np.all(v >= eval_phi(POWER1, xs / eta) * (1 - 1e-12))


def test_G_tilde_inverse_of_vartheta():
    y = eval_vartheta(EXP1, 1.0, 0.5, 0.4)
    assert eval_G_tilde(EXP1, 1.0, 0.5, y) == pytest.approx(0.4, rel=1e-9)


def test_lower_level_power():
    assert lower_level(POWER1, 2.0, 2.0) == pytest.approx(2.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        eval_G(POWER1, 0.0)
    with pytest.raises(DomainError):
        eval_phi(POWER1, -1.0)
    with pytest.raises(ConfigError):
        DriverSpec.power(-1.0)


def test_serialization_roundtrip():
    for spec in (POWER1, EXP1, NORMAL1, DriverSpec.logpower(3.0)):
        assert DriverSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        DriverSpec.from_dict({"kind": "power", "q": 1, "extra": 2})


def test_conditions_power_q2():
    r = check_conditions(DriverSpec.power(2.0))
    assert r.all_pass
    assert r.kappa1_bound == pytest.approx(1.5, rel=1e-12)
    assert r.kappa2_bound == pytest.approx(2.5, rel=1e-12)


def test_conditions_logpower_fails_c2():
    r = check_conditions(DriverSpec.logpower(2.0))
    assert not r.c2


@pytest.mark.parametrize("spec", [EXP1, NORMAL1])
def test_conditions_exponential_and_normal(spec):
    r = check_conditions(spec)
    assert r.c2 and r.c3


def test_conditions_report_is_json():
    import json
    d = json.loads(check_conditions(EXP1).to_json())
    assert d["driver"] == {"kind": "exponential", "a": 1.0}


@pytest.mark.parametrize("spec", [POWER1, EXP1, NORMAL1, DriverSpec.logpower(2.0)])
def test_drivers_monotone(spec):
    assert sampled_monotone(spec, y_max=20.0)
