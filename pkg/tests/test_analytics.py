import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aclab import analytics as an
from aclab.errors import DomainError, HypothesisError, NumericOverflow

mp.mp.dps = 40


def mp_kappa(t, beta, a):
    t, beta, a = mp.mpf(t), mp.mpf(beta), mp.mpf(a)
    if a == 0 and beta == 0:
        return t
    rho = mp.sqrt(a * a + beta * beta)
    th = mp.tanh(t * rho)
    return th / (rho - a * th)


def mp_ecost_opt(a, b, T, q0):
    return mp_kappa(T, abs(b), a) * q0 ** 2 + mp.quad(lambda s: mp_kappa(s, abs(b), a), [0, T])


# -- kappa -----------------------------------------------------------------

def test_kappa_zero_zero_is_t():
    assert an.kappa(1.0, 0.0, 0.0) == 1.0


def test_kappa_at_zero_time():
    assert an.kappa(0.0, 7.0, -3.0) == 0.0


def test_kappa_tanh_one():
    assert an.kappa(1.0, 1.0, 0.0) == pytest.approx(float(mp.tanh(1)), rel=1e-14)


@pytest.mark.parametrize("t,beta,a", [(0.3, 2.0, 1.0), (1.0, 0.5, -4.0), (2.0, 10.0, 5.0),
                                      (1.0, 1e-3, 15.0), (1.0, 1e3, -30.0), (0.01, 0.0, 3.0)])
def test_kappa_matches_high_precision(t, beta, a):
    assert an.kappa(t, beta, a) == pytest.approx(float(mp_kappa(t, beta, a)), rel=1e-12)


def test_kappa_vectorized():
    ts = np.linspace(0, 2, 9)
    out = an.kappa(ts, 1.5, 0.5)
    assert out.shape == ts.shape
    for t, v in zip(ts, out):
        assert v == pytest.approx(float(mp_kappa(t, 1.5, 0.5)), rel=1e-12, abs=1e-300)


def test_kappa_rejects_negative_time():
    with pytest.raises(DomainError):
        an.kappa(-1.0, 1.0, 0.0)


def test_kappa_rejects_nan():
    with pytest.raises(DomainError):
        an.kappa(1.0, math.nan, 0.0)


@settings(max_examples=300, deadline=None)
@given(t=st.floats(0, 10), beta=st.floats(-1e3, 1e3), a=st.floats(-1e2, 1e2))
def test_kappa_nonnegative(t, beta, a):
    try:
        v = an.kappa(t, abs(beta), a)
    except NumericOverflow:
        return
    assert v >= 0.0


# -- ecost_opt -------------------------------------------------------------

def test_ecost_opt_free_particle():
    assert an.ecost_opt(0, 0, 1, 1) == pytest.approx(1.5, rel=1e-12)


def test_ecost_opt_free_particle_q0_two():
    assert an.ecost_opt(0, 0, 1, 2) == pytest.approx(4.5, rel=1e-12)


@pytest.mark.parametrize("a,b", [(1, 1), (-5, 2), (3, -2), (15, 1e-3), (-30, 1e3), (5, 0.0)])
def test_ecost_opt_matches_high_precision(a, b):
    assert an.ecost_opt(a, b, 1.0, 1.0) == pytest.approx(float(mp_ecost_opt(a, b, 1, 1)), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-20, 20), b=st.floats(0, 100))
def test_ecost_opt_even_in_b(a, b):
    assert an.ecost_opt(a, b, 1, 1) == an.ecost_opt(a, -b, 1, 1)


def test_ecost_opt_rejects_bad_horizon():
    with pytest.raises(DomainError):
        an.ecost_opt(0, 0, 0.0, 1)


# -- phi / simple feedback -------------------------------------------------

def test_phi_zero_gain_free():
    g = an.GainSchedule.const(0.0, 1.0)
    assert an.phi(0.0, g, 0.0, 3.0) == pytest.approx(1.0, rel=1e-14)


def test_phi_unit_gain():
    g = an.GainSchedule.const(1.0, 1.0)
    assert an.phi(0.0, g, 0.0, 1.0) == pytest.approx(1 - math.exp(-2), rel=1e-12)


def test_phi_zero_exponent():
    alpha, b = 0.7, 2.0
    g = an.GainSchedule.const(alpha, 1.0)
    assert an.phi(0.25, g, b * alpha, b) == pytest.approx((1 + alpha ** 2) * 0.75, rel=1e-14)


@pytest.mark.parametrize("alpha,a,b", [(1.0, 0.0, 1.0), (0.0, 2.0, 5.0), (-1.0, 3.0, -2.0)])
def test_phi_closed_form_matches_quadrature(alpha, a, b):
    g = an.GainSchedule.const(alpha, 1.0)
    assert an.phi(0.3, g, a, b, method="closed") == pytest.approx(
        an.phi(0.3, g, a, b, method="quad"), rel=1e-8)


def test_simple_feedback_free_particle():
    g = an.GainSchedule.const(0.0, 1.0)
    assert an.ecost_simple_feedback(g, 0.0, 5.0, 1.0, 1.0) == pytest.approx(1.5, rel=1e-12)


def test_simple_feedback_q0_zero_is_integral_only():
    g = an.GainSchedule.const(1.0, 1.0)
    expected = float(mp.quad(lambda t: 1 - mp.exp(-2 * (1 - t)), [0, 1]))
    assert an.ecost_simple_feedback(g, 0.0, 1.0, 1.0, 0.0) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("a,b", [(0.0, 1.0), (1.0, 1.0), (-5.0, 2.0), (3.0, -2.0)])
def test_optimal_schedule_reproduces_ecost_opt(a, b):
    g = an.GainSchedule.optimal(b, a, 1.0)
    assert an.ecost_simple_feedback(g, a, b, 1.0, 1.0) == pytest.approx(
        an.ecost_opt(a, b, 1.0, 1.0), rel=1e-6)


@pytest.mark.parametrize("alpha,a,b", [(1.0, 1.0, 1.0), (0.0, 5.0, 2.0), (-1.0, -5.0, 2.0)])
def test_constant_gain_closed_form_matches_mp(alpha, a, b):
    c = a - b * alpha

    def phi_mp(t):
        s = 1 - t
        return (1 + alpha ** 2) * (mp.expm1(2 * c * s) / (2 * c) if c else s)

    expected = phi_mp(0) + mp.quad(phi_mp, [0, 1])
    g = an.GainSchedule.const(alpha, 1.0)
    assert an.ecost_simple_feedback(g, a, b, 1.0, 1.0) == pytest.approx(float(expected), rel=1e-12)


def test_simple_feedback_overflow_is_reported():
    g = an.GainSchedule.const(0.0, 1.0)
    with pytest.raises(NumericOverflow):
        an.ecost_simple_feedback(g, 400.0, 0.0, 1.0, 1.0)


def test_unbounded_schedule_rejected():
    with pytest.raises(DomainError):
        an.GainSchedule(lambda s: math.inf, 1.0)


# -- bounds ----------------------------------------------------------------

def test_cg_bound_plugin():
    assert an.cg_cost_bound(1, 0, 1, 1, 1) == pytest.approx(4.0)
    assert an.cg_cost_bound(1, 0, 2, 1, 1) == pytest.approx(2.0)
    assert an.cg_cost_bound(0, 1, 123.0, 1, 1) == pytest.approx(math.e ** 2)


def test_cg_bound_hypothesis():
    with pytest.raises(HypothesisError):
        an.cg_cost_bound(1, 5, 1, 1, 1)


@pytest.mark.parametrize("alpha,a,b", [(1.0, 0.0, 1.0), (1.0, 0.0, 2.0), (2.0, 1.0, 3.0)])
def test_cg_bound_dominates_exact(alpha, a, b):
    g = an.GainSchedule.const(alpha, 1.0)
    assert an.ecost_simple_feedback(g, a, b, 1.0, 1.0) <= an.cg_cost_bound(alpha, a, b, 1, 1)


def test_opt_lower_bound_regimes():
    assert an.opt_lower_bound(10, 20, 1, 1, 1) == (an.REGIME_LARGE_B, pytest.approx(1 / 20))
    reg, val = an.opt_lower_bound(10, 10 * math.exp(-10) * 0.5, 1, 1, 1)
    assert reg == an.REGIME_SMALL_B and val == pytest.approx(math.exp(20) / 10)
    assert an.opt_lower_bound(10, 1, 1, 1, 1) == (an.REGIME_MID_B, pytest.approx(10.0))
    assert an.opt_lower_bound(0.5, 1, 1, 1, 1) == (an.REGIME_BOUNDED_A, pytest.approx(1 / 2.5))


def test_opt_lower_bound_needs_positive_constant():
    with pytest.raises(DomainError):
        an.opt_lower_bound(1, 1, 1, 1, 0.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-20, 20), b=st.floats(-100, 100))
def test_kappa_floor_below_ecost_opt(a, b):
    assert an.kappa_floor(a, b, 1, 1) <= an.ecost_opt(a, b, 1, 1)


# -- X process and reflection ---------------------------------------------

def test_x_moments_convention_case():
    assert an.x_process_moments(0, 2, 1) == (2.0, 1.0)


def test_x_moments_long_time():
    m, v = an.x_process_moments(1, 0, 100)
    assert m == 0 and v == pytest.approx(0.5, rel=1e-12)


def test_x_moments_negative_alpha():
    m, v = an.x_process_moments(-1, 1, 1)
    assert m == pytest.approx(math.e - 1, rel=1e-14)
    assert v == pytest.approx((math.e ** 2 - 1) / 2, rel=1e-14)


def test_reflection_standard_tail():
    assert an.reflection_sup_prob(0, 1, 1) == pytest.approx(float(2 * (1 - mp.ncdf(1))), rel=1e-12)


def test_reflection_small_level_tends_to_one():
    assert an.reflection_sup_prob(0, 1, 1e-12) == pytest.approx(1.0, abs=1e-9)


def test_reflection_plugin():
    sigma = mp.sqrt((1 - mp.exp(-2)) / 2)
    assert an.reflection_sup_prob(1, 1, 1) == pytest.approx(float(2 * (1 - mp.ncdf(1 / sigma))), rel=1e-12)


def test_reflection_rejects_nonpositive_level():
    with pytest.raises(DomainError):
        an.reflection_sup_prob(0, 1, 0.0)
