import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from malliavin_lab import expr as ex
from malliavin_lab.model import SdeModel
from malliavin_lab.truncation import (CutoffScheme, TruncatedModel, build_cutoff, bump, bump_cdf, bump_sup,
                                      cutoff_derivative, cutoff_sups, truncate, verify_cutoff_bounds)


def raw_bump(t):
    return math.exp(-1.0 / (1.0 - t * t)) if abs(t) < 1 else 0.0


NORM = quad(raw_bump, -1, 1, epsabs=1e-14, epsrel=1e-13)[0]


def test_bump_normalised():
    assert quad(lambda t: float(bump(t)), -1, 1, epsabs=1e-14)[0] == pytest.approx(1.0, abs=1e-12)


def test_bump_cdf_against_quadrature():
    for t in np.random.default_rng(0).uniform(-1, 1, 200):
        want = quad(raw_bump, -1, t, epsabs=1e-14, epsrel=1e-13)[0] / NORM
        assert float(bump_cdf(t)) == pytest.approx(want, abs=1e-10)


def test_bump_cdf_symmetry_and_clamping():
    assert float(bump_cdf(0.0)) == 0.5
    assert float(bump_cdf(-1.0)) == 0.0 and float(bump_cdf(1.0)) == 1.0
    assert float(bump_cdf(-7.0)) == 0.0 and float(bump_cdf(7.0)) == 1.0
    t = np.linspace(-1, 1, 4001)
    assert np.all(np.diff(bump_cdf(t)) >= 0)


def test_bump_sup_is_peak():
    assert bump_sup() == pytest.approx(math.exp(-1) / NORM, rel=1e-12)


# -- cutoff -------------------------------------------------------------------------


def test_cutoff_examples():
    s = build_cutoff(1, 2)
    assert (s.plateau, s.eps, s.radius) == (2.0, 1.0, 3.0)
    assert s.phi(0.0) == 1.0
    assert s.phi(3.0) == 0.5
    assert s.phi(4.5) == 0.0


def test_cutoff_derivative_at_origin_and_plateau():
    s = build_cutoff(1, 2)
    assert cutoff_derivative(s, 0.0, 1) == 0.0
    assert np.all(cutoff_derivative(s, np.linspace(-2, 2, 101), 1) == 0.0)
    assert np.all(cutoff_derivative(s, np.linspace(-2, 2, 101), 2) == 0.0)


@pytest.mark.parametrize("xi, n", [(1, 2), (1, 5), (4, 2), (0.5, 3)])
def test_cutoff_shape(xi, n):
    s = CutoffScheme(xi, n)
    P = s.plateau
    pos = np.linspace(0, 2.5 * P, 10001)
    x = np.concatenate([-pos[:0:-1], pos])
    phi = s.phi(x)
    assert np.all((phi >= 0) & (phi <= 1))
    assert np.all(phi[np.abs(x) <= P] == 1.0)
    assert np.all(phi[np.abs(x) >= 2 * P] == 0.0)
    np.testing.assert_array_equal(phi, phi[::-1])
    np.testing.assert_array_equal(s.derivative(x, 1), -s.derivative(x, 1)[::-1])
    right = phi[x >= 0]
    assert np.all(np.diff(right) <= 1e-15)


@pytest.mark.parametrize("xi, n", [(1, 2), (1, 7), (4, 2), (2, 3)])
def test_cutoff_derivatives_match_finite_differences(xi, n):
    s = CutoffScheme(xi, n)
    P = s.plateau
    x = np.random.default_rng(n).uniform(-2.2 * P, 2.2 * P, 1000)
    h = 1e-5 * s.eps
    fd1 = (s.phi(x + h) - s.phi(x - h)) / (2 * h)
    assert np.max(np.abs(fd1 - s.derivative(x, 1))) * s.eps <= 1e-6
    fd2 = (s.derivative(x + h, 1) - s.derivative(x - h, 1)) / (2 * h)
    assert np.max(np.abs(fd2 - s.derivative(x, 2))) * s.eps ** 2 <= 1e-6


@pytest.mark.parametrize("xi, n", [(1, 1), (1, 4), (4, 3)])
def test_cutoff_derivative_bound(xi, n):
    s = CutoffScheme(xi, n)
    x = np.linspace(-2.2 * s.plateau, 2.2 * s.plateau, 40001)
    assert np.max(np.abs(s.derivative(x, 1))) <= bump_sup() / s.eps * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 3), st.integers(1, 6), st.floats(-1, 1))
def test_larger_level_dominates(xi, n, u):
    small, large = CutoffScheme(xi, n), CutoffScheme(xi, 2 * n)
    x = u * 2 * small.plateau
    assert large.phi(x) >= small.phi(x)


def test_invalid_scheme():
    with pytest.raises(ValueError):
        CutoffScheme(1, 0)
    with pytest.raises(ValueError):
        cutoff_derivative(CutoffScheme(1, 1), 0.0, 3)


# -- truncated coefficients ------------------------------------------------------------


def quintic():
    return SdeModel.from_text(b="-x^5", sigma="x^2", x0=1.0, T=1.0)


def test_truncated_examples():
    t = TruncatedModel(quintic(), build_cutoff(1, 2))
    assert t.b_n(1.0) == -1.0
    assert t.b_n(5.0) == 0.0
    assert t.b_n(3.0) == pytest.approx(-121.5, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(-1, 1))
def test_truncated_agrees_on_plateau(n, u):
    m = quintic()
    t = TruncatedModel(m, CutoffScheme(4, n))
    x = u * t.scheme.plateau
    assert t.b_n(x) == ex.evaluate(m.b, x)
    assert t.sigma_n(x) == ex.evaluate(m.sigma, x)


def test_truncated_derivatives_by_product_rule():
    m = SdeModel.from_text(b="-x^3+x", sigma="x^2+0.5", f="sin(x)")
    t = TruncatedModel(m, CutoffScheme(1, 2))
    co = t.coefficients()
    x = np.linspace(-5, 5, 801)
    h = 1e-5
    np.testing.assert_allclose(t.b_n(x, 1), (t.b_n(x + h) - t.b_n(x - h)) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(t.sigma_n(x, 2), (t.sigma_n(x + h, 1) - t.sigma_n(x - h, 1)) / (2 * h), atol=1e-5)
    # f is not truncated
    np.testing.assert_allclose(co.drift(x), t.b_n(x) + np.sin(x), atol=1e-15)
    np.testing.assert_allclose(co.drift_d1(x), t.b_n(x, 1) + np.cos(x), atol=1e-15)
    np.testing.assert_allclose(co.diffusion_d2(x), t.sigma_n(x, 2), atol=1e-15)
    assert co.plateau == 2.0 and co.default_scheme == "explicit-euler"


def test_truncated_is_globally_lipschitz():
    t = TruncatedModel(quintic(), CutoffScheme(1, 3))
    x = np.linspace(-50, 50, 200001)
    assert np.isfinite(np.max(np.abs(t.b_n(x, 1))))
    assert np.all(t.b_n(x[np.abs(x) >= 6.0]) == 0.0)


def test_truncate_checks_exponent():
    with pytest.raises(ValueError):
        truncate(quintic(), CutoffScheme(1, 2))
    assert truncate(quintic(), CutoffScheme(4, 2)).scheme.xi == 4


# -- uniform bounds --------------------------------------------------------------------


def test_cutoff_bounds_linear_model_uniform():
    m = SdeModel.from_text(b="-x", sigma="1")
    rep = verify_cutoff_bounds(m, 1.0)
    assert rep.all_passed
    sups = rep.sups["sup_b_n_d1"]
    assert all(v <= sups[0] + 1e-12 for v in sups)


def test_cutoff_bounds_zero_model():
    rep = verify_cutoff_bounds(SdeModel.from_text(b="0", sigma="0"), 1.0, levels=range(1, 5))
    for q in ("sup_abs_b_phi_d1", "sup_abs_sigma_phi_d1", "sup_b_n_d1", "sup_sigma_n_d1_sq_excess"):
        assert all(v == 0.0 for v in rep.sups[q])


def test_cutoff_sups_need_full_support():
    with pytest.raises(ValueError):
        cutoff_sups(TruncatedModel(quintic(), CutoffScheme(1, 2)), R=3.0)


def test_quintic_b_phi_derivative_grows_with_level():
    # |b phi_n'| peaks near |x| ~ 1.5 n^xi where |b| ~ n^{5 xi} and |phi_n'| ~ n^{-xi}
    rep = verify_cutoff_bounds(quintic(), 4.0, levels=(1, 2, 4))
    s = rep.sups["sup_abs_b_phi_d1"]
    assert s[1] / s[0] == pytest.approx(2.0 ** 16, rel=0.05)
    assert s[2] / s[1] == pytest.approx(2.0 ** 16, rel=0.05)


@pytest.mark.xfail(strict=True, reason="sup |b phi_n'| scales like n^(4 xi) for b = -x^5; no n-uniform bound")
def test_quintic_cutoff_bounds_uniform():
    assert verify_cutoff_bounds(quintic(), 4.0).passed["sup_abs_b_phi_d1"]
