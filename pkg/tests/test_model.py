import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from malliavin_lab import expr as ex
from malliavin_lab.model import (GrowthError, SdeModel, bound_function, check_bound, check_growth,
                                 check_hypotheses, check_monotone, gronwall_envelope, hormander_check,
                                 raw_coefficients)


def model(b, sigma="1", f="0", x0=0.0, T=1.0, **kw):
    return SdeModel.from_text(b=b, sigma=sigma, f=f, x0=x0, T=T, **kw)


def test_model_rejects_bad_horizon():
    with pytest.raises(ValueError):
        model("-x", T=0.0)


def test_drift_is_b_plus_f():
    m = model("-x^3", f="sin(x)")
    xs = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(ex.evaluate(m.drift, xs), -xs ** 3 + np.sin(xs))


# -- monotonicity -------------------------------------------------------------


def test_monotone_linear():
    r = check_monotone(model("-x"), R=10)
    assert r.K_best == 1.0 and r.passed


def test_monotone_quintic():
    r = check_monotone(model("-x^5", "x^2"), R=10)
    assert r.K_best == 0.0 and r.passed


def test_monotone_quadratic_fails_and_drifts_with_R():
    r = check_monotone(model("x^2"), R=10)
    assert r.K_best == pytest.approx(-20.0)
    assert r.K_doubled == pytest.approx(-40.0)
    assert not r.passed


def test_monotone_non_polynomial_uses_grid():
    r = check_monotone(model("-x - sin(x)"), R=10)
    assert r.method == "grid" and r.passed
    assert r.K_best == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["-x", "-x^5", "-x^3 - x", "-x^5 + x^2 - x", "-2*x^3+1"]), st.integers(0, 2 ** 31))
def test_K_best_agrees_with_pairwise_definition(b, seed):
    m = model(b)
    R = 10.0
    K = check_monotone(m, R=R).K_best
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-R, R, (2, 1000))
    bx, by = ex.evaluate(m.b, x), ex.evaluate(m.b, y)
    assert np.all((by - bx) * (y - x) <= -K * (y - x) ** 2 + 1e-9 * (1 + np.abs(by - bx) * np.abs(y - x)))


# -- Bound ---------------------------------------------------------------------


def test_bound_quintic_matches_closed_form():
    r = check_bound(model("-x^5", "x^2"), 1, R=10)
    assert r.passed and r.beta == 0.0
    assert r.alpha == pytest.approx((46 / 3) ** 2 * (23 / 3), rel=1e-12)


def test_bound_quintic_against_numeric_maximiser():
    g = bound_function(model("-x^5", "x^2"), 1)
    res = minimize_scalar(lambda a: -float(ex.evaluate(g, a)), bounds=(0.0, 10.0), method="bounded",
                          options={"xatol": 1e-12})
    assert check_bound(model("-x^5", "x^2"), 1).alpha == pytest.approx(-res.fun, rel=1e-9)


def test_bound_linear():
    r = check_bound(model("-x"), 1, R=10)
    assert r.passed and r.beta == 0.0 and r.alpha == pytest.approx(11.0)
    assert r.negative_beta_admissible


def test_bound_cubic_fails():
    r = check_bound(model("x^3"), 1, R=10)
    assert not r.passed and math.isinf(r.alpha)


def test_bound_function_formula():
    g = bound_function(model("-x^5", "x^2"), 1)
    a = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(ex.evaluate(g, a), -a ** 6 + 23 * a ** 4, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("b, sigma, p", [("-x^5", "x^2", 1), ("-x^5", "x^2", 2), ("-x", "1", 1),
                                         ("-x^3", "x", 2), ("-x^7+x", "x^3+1", 1), ("-x - tanh(x)", "cos(x)", 1)])
def test_bound_holds_at_fresh_points(b, sigma, p):
    m = model(b, sigma)
    R = 10.0
    r = check_bound(m, p, R=R)
    assert r.passed
    a = np.random.default_rng(7).uniform(-R, R, 10_000)
    g = ex.evaluate(bound_function(m, p), a)
    assert np.all(g <= r.alpha + r.beta * a ** 2 + 1e-9 * (1 + np.abs(g)))


# -- growth --------------------------------------------------------------------


def test_growth_quintic():
    t = check_growth(model("-x^5", "x^2"), j_max=5)
    assert [r.q for r in t.rows] == [5, 4, 3, 2, 1, 0]
    assert t.xi == 4


def test_growth_linear():
    t = check_growth(model("-x"), j_max=3)
    assert [r.q for r in t.rows] == [1, 0, 0, 0]
    # |b'| + |sigma'| = 1 over 1 + |x|^0 = 2
    assert t.rows[1].lam == pytest.approx(0.5)


def test_growth_zero_model():
    t = check_growth(model("0", "0"), j_max=4)
    assert all(r.lam == 0.0 for r in t.rows)


def test_growth_lambda_bounds_fresh_points():
    m = model("-x^5+3*x", "x^2-1")
    t = check_growth(m, j_max=5, R=10)
    xs = np.random.default_rng(1).uniform(-30, 30, 5000)
    for r in t.rows:
        lhs = np.abs(ex.evaluate(ex.diff(m.b, r.j), xs)) + np.abs(ex.evaluate(ex.diff(m.sigma, r.j), xs))
        assert np.all(lhs <= r.lam * (1 + np.abs(xs) ** r.q) * (1 + 1e-12))


def test_growth_non_polynomial_needs_declaration():
    with pytest.raises(GrowthError):
        check_growth(model("-x", "exp(-x^2)"))
    t = check_growth(model("-x", "exp(-x^2)", growth_exponents={j: 0 for j in range(6)}))
    assert t.xi == 0 and all(r.declared for r in t.rows)


# -- Hormander -------------------------------------------------------------------


def test_hormander_constant_sigma():
    r = hormander_check(model("-x", "1", x0=3.0))
    assert r.passed and r.witness == "A(x0)≠0"


def test_hormander_degenerate_at_origin():
    r = hormander_check(model("-x^5", "x^2", x0=0.0))
    assert not r.passed and r.witness is None


def test_hormander_second_order_witness():
    r = hormander_check(model("1-x^5", "x^2", x0=0.0))
    assert r.passed and r.witness == 2


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["x^2", "x^3", "x^2+x", "sin(x)", "x^4-x^2", "0"]),
       st.sampled_from(["1-x^5", "-x", "x^2+2"]),
       st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3),
       st.sampled_from([0.0, 1.0]))
def test_hormander_invariant_under_sigma_scaling(sigma, b, c, x0):
    m = model(b, sigma, x0=x0)
    scaled = model(b, f"({c!r})*({sigma})", x0=x0)
    r1, r2 = hormander_check(m), hormander_check(scaled)
    assert (r1.passed, r1.witness) == (r2.passed, r2.witness)


# -- report ----------------------------------------------------------------------


def test_report_for_quintic_passes_with_json_keys():
    rep = check_hypotheses(model("-x^5", "x^2"))
    assert rep.passed
    d = json.loads(json.dumps(rep.to_dict()))
    for key in ("K_best", "k1", "bounds", "growth", "xi", "pass"):
        assert key in d
    assert d["xi"] == 4 and d["k1"] == 0.0
    assert d["flags"]["semi_monotone_only"]


def test_report_negative_cases():
    assert not check_hypotheses(model("x^2")).passed
    assert not check_hypotheses(model("x^3")).passed
    assert not check_hypotheses(model("-x", f="x^2")).passed  # f' unbounded


def test_report_trivial_model_passes():
    rep = check_hypotheses(model("0", "0"))
    assert rep.passed
    assert rep.bound_for(1).alpha == 0.0


def test_report_lipschitz_f():
    rep = check_hypotheses(model("-x^3", f="2*sin(x)"))
    assert rep.f_pass and rep.k1 == pytest.approx(2.0, rel=1e-9)


def test_gronwall_envelope_solves_linear_ode():
    alpha, beta, k1, f0, x0, T = 3.0, 0.5, 0.2, 0.1, 1.2, 0.7
    a = 2 * (alpha + f0 ** 2)
    b = 2 * beta + 2 * k1 ** 2 + 1
    sol = solve_ivp(lambda t, y: 3 * b * y + 3 * a, (0, T), [x0 ** 2], rtol=1e-12, atol=1e-12)
    assert gronwall_envelope(x0, alpha, beta, k1, f0, T) == pytest.approx(sol.y[0, -1], rel=1e-9)


def test_raw_coefficients_match_symbolic_derivatives():
    m = model("-x^5+x", "x^2+0.5", f="sin(x)")
    co = raw_coefficients(m)
    xs = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(co.drift_d1(xs), -5 * xs ** 4 + 1 + np.cos(xs))
    np.testing.assert_allclose(co.drift_d2(xs), -20 * xs ** 3 - np.sin(xs))
    np.testing.assert_allclose(co.diffusion_d2(xs), 2.0)
    assert co.default_scheme == "tamed-euler" and math.isinf(co.plateau)
