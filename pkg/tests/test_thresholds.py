import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kslab.core_model import SystemParams
from kslab.thresholds import (NeumannDivergenceError, NoHardyInequalityError, bessel_dimension,
                              blows_up, delta_form_bound, extrapolation_constant,
                              fractional_hardy_constant, gamma_fn, kappa_from_nu,
                              kappa_max_lemma, nu_from_kappa, nu_max, nu_max_theorem2,
                              operator_norm_chain, sobolev_exponent, threshold_at_alpha)


def test_gamma_fn():
    assert gamma_fn(1) == 1.0
    assert math.isclose(gamma_fn(0.5), math.sqrt(math.pi), rel_tol=1e-15)
    assert abs(gamma_fn(0.25) - 3.625609908) < 1e-8
    for z in np.linspace(0.125, 25, 41):
        ref = float(mpmath.gamma(mpmath.mpf(z)))
        assert math.isclose(gamma_fn(z), ref, rel_tol=1e-12)
        assert math.isclose(gamma_fn(z + 1) / (z * gamma_fn(z)), 1.0, rel_tol=1e-12)
    with pytest.raises(ValueError):
        gamma_fn(0)


def test_hardy_constant_alpha1():
    C = fractional_hardy_constant(1.0)
    assert math.isclose(C, 0.5 * gamma_fn(0.25) ** 2 / gamma_fn(0.75) ** 2, rel_tol=1e-14)
    assert abs(C - 4.3768) < 1e-4
    assert abs(1 / C - 0.22848) < 1e-5


def _threshold_mp(alpha, N, d):
    a = mpmath.mpf(alpha)
    val = (mpmath.mpf(N) ** (1.5 * a - 1) / mpmath.mpf(N - 1) ** (1 + a / 2) * 2**a
           * mpmath.gamma((d + a) / 4) ** 2 / mpmath.gamma((d - a) / 4) ** 2)
    return float(val ** (1 / a))


@pytest.mark.parametrize("N,d", [(2, 2), (5, 2), (1000, 2), (10**9, 2), (2, 3), (4, 5)])
def test_threshold_curve_against_mpmath(N, d):
    for a in (1.0, 1.3, 1.77, 1.999):
        assert math.isclose(threshold_at_alpha(a, N, d), _threshold_mp(a, N, d), rel_tol=1e-11)


def test_delta_example_d2():
    p = SystemParams(2, 2, 1.0)
    expected = (1 / math.sqrt(2)) * 0.5 * gamma_fn(0.25) ** 2 / gamma_fn(0.75) ** 2
    assert math.isclose(delta_form_bound(1.0, p), expected, rel_tol=1e-13)
    assert abs(expected - 3.0949) < 1e-4
    assert delta_form_bound(1.5, p.replace(nu=0.0)) == 0.0


def test_delta_d3_alpha2_is_nu_squared():
    # at nu = nu_max = 1 the bound equals 1, so delta = nu^2
    for nu in (0.3, 1.0, 2.0):
        assert math.isclose(delta_form_bound(2.0, SystemParams(3, 2, nu)), nu**2, rel_tol=1e-12)


def test_no_2d_hardy_at_alpha_2():
    with pytest.raises(NoHardyInequalityError):
        delta_form_bound(2.0, SystemParams(2, 2, 1.0))


@settings(max_examples=80, deadline=None)
@given(st.floats(1.0, 1.999), st.integers(2, 10**6), st.integers(2, 6))
def test_delta_duality(alpha, N, d):
    nu = threshold_at_alpha(alpha, N, d)
    assert math.isclose(delta_form_bound(alpha, SystemParams(d, N, nu)), 1.0, rel_tol=1e-9)
    assert delta_form_bound(alpha, SystemParams(d, N, 0.9 * nu)) < 1.0
    assert delta_form_bound(alpha, SystemParams(d, N, 1.1 * nu)) > 1.0


def test_nu_max_closed_forms():
    assert abs(nu_max(2, 3).max_value - 1.0) < 1e-9
    assert abs(nu_max(2, 4).max_value - 2.0) < 1e-9
    assert nu_max(2, 3).argmax_alpha == 2.0


def test_nu_max_curve_invariants():
    c = nu_max(2, 2)
    assert np.all(np.isfinite(c.values)) and np.all(c.values > 0)
    assert c.max_value == c.values.max()
    assert c.argmax_alpha in c.alphas
    assert c.alphas[-1] < 2.0
    assert abs(c.max_value - 0.32627) < 1e-5
    # refined maximum is a stationary point
    a = c.argmax_alpha
    assert threshold_at_alpha(a, 2, 2) >= threshold_at_alpha(a + 1e-5, 2, 2)
    assert threshold_at_alpha(a, 2, 2) >= threshold_at_alpha(a - 1e-5, 2, 2)


def test_nu_max_d3_N2_curve_exceeds_endpoint():
    # the alpha = 2 closed form is the admissibility threshold; the curve's
    # interior maximum is reported separately
    c = nu_max(2, 3)
    assert c.grid_max_value > 1.04 and 1.5 < c.grid_argmax_alpha < 1.7
    for N in (3, 8, 1000):
        for d in (3, 4, 6):
            c = nu_max(N, d)
            assert c.grid_argmax_alpha == pytest.approx(2.0)


def test_nu_max_large_N_ratio():
    r = nu_max(10**9, 2).max_value / nu_max(1000, 2).max_value
    assert 0.35 <= r <= 0.65


def test_nu_max_csv():
    text = nu_max(3, 2, step=1e-3).to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "alpha,nu_max"
    assert len(lines) >= 1001


def test_theorem2_thresholds():
    assert math.isclose(nu_max_theorem2(3), math.sqrt(2))
    assert nu_max_theorem2(4) == 4
    assert nu_max_theorem2(10) == 16
    with pytest.raises(ValueError):
        nu_max_theorem2(2)


def test_kappa_thresholds():
    assert sobolev_exponent(2, 3) == 1.5
    assert math.isclose(kappa_max_lemma(2, 3), 36.0)
    assert math.isclose(kappa_max_lemma(2, 4), 256 / 9)
    assert abs(kappa_max_lemma(10**6, 5) - 16) < 1e-3
    assert math.isclose(nu_from_kappa(kappa_from_nu(0.7, 3), 3), 0.7)


def test_operator_norm_chain():
    assert operator_norm_chain(1.0, 0.0) == (0.0, 0.0, 0.0)
    r, q, t = operator_norm_chain(1.0, 0.25)
    assert (r, q, t) == pytest.approx((0.5, 0.5, 0.25))
    r, q, t = operator_norm_chain(2.0, 0.81)
    assert (r, q, t) == pytest.approx((0.9, 1.0, 0.9))
    with pytest.raises(NeumannDivergenceError):
        operator_norm_chain(1.5, 1.0)


def test_bessel_dimension():
    assert bessel_dimension(2, 4) == 0 and blows_up(2, 4)
    assert bessel_dimension(2, 0) == 2 and not blows_up(2, 0)
    assert bessel_dimension(5, 2) == 4
    assert bessel_dimension(2, 1, d=3) == 2.5


def test_extrapolation_constant():
    assert extrapolation_constant(1, 2, math.inf, 1, 1, 1) == pytest.approx((0.5, 16.0))
    beta, M = extrapolation_constant(1, 2, 4, 1, 1, 1)
    assert beta == pytest.approx(2 / 3) and M == pytest.approx(512.0)
    assert extrapolation_constant(1, 2, 4, 1, 2, 1)[1] == pytest.approx(2 * M)
    with pytest.raises(ValueError):
        extrapolation_constant(2, 1, 4, 1, 1, 1)
