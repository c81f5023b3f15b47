"""Closed-form and quadrature quantities for dq = (aq + bu)dt + dW with cost int(q^2 + u^2)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import DomainError, HypothesisError, NumericError, NumericOverflow

KAPPA_QUAD_RTOL = 1e-10
PHI_QUAD_RTOL = 1e-8
_EXP_MAX = 709.0


def _finite(**values):
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise DomainError(f"{name} must be finite, got {v!r}")


def _kappa_array(t: np.ndarray, beta: float, a: float) -> np.ndarray:
    if a == 0.0 and beta == 0.0:
        return t.astype(float, copy=True)
    rho = math.hypot(a, beta)
    x = t * rho
    th = np.tanh(x)
    if a > 0.0:
        # rho - a*tanh(x) without cancellation: (rho - a) + a*(1 - tanh x)
        em = np.exp(-2.0 * x)
        den = beta * beta / (rho + a) + a * 2.0 * em / (1.0 + em)
    else:
        den = rho - a * th
    with np.errstate(divide="ignore", invalid="ignore"):
        out = th / den
    # den underflows to 0 only when beta == 0 and exp(2at) is beyond float range
    out = np.where((den == 0.0) & (th > 0.0), np.inf, out)
    out = np.where(x == 0.0, 0.0, out)
    return out


def kappa(t, beta: float, a: float = 0.0):
    """Optimal Riccati kernel kappa(t, beta; a); t may be an array of remaining times.

    Returns ``t`` when ``a == beta == 0``, otherwise
    ``tanh(t*rho) / (rho - a*tanh(t*rho))`` with ``rho = hypot(a, beta)``.
    """
    _finite(t=t, beta=beta, a=a)
    arr = np.asarray(t, dtype=float)
    if np.any(arr < 0.0):
        raise DomainError(f"kappa needs t >= 0, got t={t!r}")
    out = _kappa_array(arr, float(beta), float(a))
    if np.any(out < 0.0) or np.any(np.isnan(out)):
        raise NumericError(f"kappa denominator non-positive for t={t!r}, beta={beta!r}, a={a!r}")
    if np.any(np.isinf(out)):
        raise NumericOverflow(f"kappa overflows float64 for t={t!r}, beta={beta!r}, a={a!r}")
    return float(out) if out.ndim == 0 else out


def _quad(f, lo, hi, rtol, points=None):
    if hi <= lo:
        return 0.0
    # convergence is judged from the returned error estimate below
    with np.errstate(over="raise"), warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=rtol, limit=500,
                                      points=points)
        except FloatingPointError as exc:
            raise NumericOverflow(f"integrand overflow on [{lo}, {hi}]") from exc
    if not math.isfinite(val):
        raise NumericOverflow(f"integral on [{lo}, {hi}] is not finite")
    if err > max(10 * rtol * abs(val), 1e-300):
        raise NumericError(f"quadrature did not converge on [{lo}, {hi}]: value={val}, err={err}")
    return val


def kappa_integral(T: float, beta: float, a: float = 0.0) -> float:
    """Adaptive quadrature of kappa(., beta; a) over [0, T]."""
    _finite(T=T)
    if T < 0:
        raise DomainError("T must be >= 0")
    rho = math.hypot(a, beta)
    points = [1.0 / rho] if rho > 0 and 1.0 / rho < T else None
    return _quad(lambda s: float(_kappa_array(np.asarray(s), beta, a)), 0.0, T,
                 KAPPA_QUAD_RTOL, points)


def ecost_opt(a: float, b: float, T: float, q0: float) -> float:
    """Optimal expected cost when b is known: kappa(T,b)*q0^2 + int_0^T kappa(t,b) dt."""
    _finite(a=a, b=b, T=T, q0=q0)
    if T <= 0:
        raise DomainError(f"T must be > 0, got {T}")
    beta = abs(b)
    return kappa(T, beta, a) * q0 * q0 + kappa_integral(T, beta, a)


@dataclass(frozen=True)
class GainSchedule:
    """Gain function v on [0, T] of a simple feedback strategy u = -v(t) q.

    ``constant`` is set for v == alpha so closed forms can be used.
    """

    v: Callable[[float], float]
    T: float
    constant: float | None = None

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DomainError(f"GainSchedule needs finite T > 0, got {self.T}")
        samples = [self.v(s) for s in np.linspace(0.0, self.T, 257)]
        if not np.all(np.isfinite(samples)):
            raise DomainError("gain schedule is not bounded on [0, T]")

    @classmethod
    def const(cls, alpha: float, T: float) -> "GainSchedule":
        _finite(alpha=alpha)
        alpha = float(alpha)
        return cls(lambda s: alpha, T, constant=alpha)

    @classmethod
    def optimal(cls, beta: float, a: float, T: float) -> "GainSchedule":
        """Gain of sigma_opt(beta): v(t) = beta * kappa(T - t, beta; a)."""
        beta, a = float(beta), float(a)
        return cls(lambda s: beta * float(_kappa_array(np.asarray(max(T - s, 0.0)), abs(beta), a)), T)


def _g1(x: float) -> float:
    return math.expm1(x) / x if x != 0.0 else 1.0


def _phi_const(t: float, alpha: float, a: float, b: float, T: float) -> float:
    c = a - b * alpha
    s = T - t
    if 2.0 * c * s > _EXP_MAX:
        raise NumericOverflow(f"phi exponent 2*(a - b*alpha)*(T - t) = {2 * c * s:.6g} overflows")
    return (1.0 + alpha * alpha) * s * _g1(2.0 * c * s)


def _phi_quad(t: float, gain: GainSchedule, a: float, b: float) -> float:
    T = gain.T
    v = gain.v

    def rate(s):
        return a - b * v(s)

    def integrand(tau):
        g = _quad(rate, t, tau, 1e-12) if tau > t else 0.0
        if 2.0 * g > _EXP_MAX:
            raise NumericOverflow(f"phi exponent {2 * g:.6g} overflows at tau={tau}")
        vt = v(tau)
        return (1.0 + vt * vt) * math.exp(2.0 * g)

    return _quad(integrand, t, T, PHI_QUAD_RTOL * 1e-2)


def phi(t: float, gain: GainSchedule, a: float, b: float, method: str = "auto") -> float:
    """phi(t, b) = int_t^T (1 + v(tau)^2) exp(2 int_t^tau (a - b v(s)) ds) dtau.

    ``method`` is ``"auto"`` (closed form for constant gains), ``"closed"`` or ``"quad"``.
    """
    _finite(t=t, a=a, b=b)
    if not 0.0 <= t <= gain.T:
        raise DomainError(f"phi needs 0 <= t <= T, got t={t}, T={gain.T}")
    if method == "quad" or (method == "auto" and gain.constant is None):
        return _phi_quad(t, gain, a, b)
    if gain.constant is None:
        raise DomainError("closed-form phi needs a constant gain")
    return _phi_const(t, gain.constant, a, b, gain.T)


def ecost_simple_feedback(gain: GainSchedule, a: float, b: float, T: float, q0: float,
                          method: str = "auto") -> float:
    """Expected cost phi(0) q0^2 + int_0^T phi(t) dt of the simple feedback strategy ``gain``."""
    _finite(a=a, b=b, T=T, q0=q0)
    if abs(T - gain.T) > 1e-12 * max(1.0, T):
        raise DomainError(f"gain schedule horizon {gain.T} differs from T={T}")
    if gain.constant is not None and method != "quad":
        alpha = gain.constant
        c = a - b * alpha
        if 2.0 * c * T > _EXP_MAX:
            raise NumericOverflow(f"expected cost of CG({alpha}) overflows (2(a-b*alpha)T = {2 * c * T:.6g})")
        x = 2.0 * c * T
        # int_0^T s*g1(2cs) ds = T^2 * (expm1(x) - x) / x^2
        tail = T * T * ((math.expm1(x) - x) / (x * x) if abs(x) > 1e-4 else 0.5 + x / 6.0 + x * x / 24.0)
        return (1.0 + alpha * alpha) * (T * _g1(x) * q0 * q0 + tail)
    head = phi(0.0, gain, a, b, method="quad")
    body = _quad(lambda s: phi(s, gain, a, b, method="quad"), 0.0, T, PHI_QUAD_RTOL)
    return head * q0 * q0 + body


def cg_cost_bound(alpha: float, a: float, b: float, T: float, q0: float) -> float:
    """Upper bound on the expected cost of CG(alpha).

    a < b*alpha: (q0^2 + T)(1 + alpha^2) / |a - b*alpha|.
    alpha == 0 and a > 0: (q0^2 + T) exp(2aT) / (2a).
    """
    _finite(alpha=alpha, a=a, b=b, T=T, q0=q0)
    if a < b * alpha:
        return (q0 * q0 + T) * (1.0 + alpha * alpha) / abs(a - b * alpha)
    if alpha == 0.0 and a > 0.0:
        if 2.0 * a * T > _EXP_MAX:
            raise NumericOverflow("exp(2aT) overflows")
        return (q0 * q0 + T) * math.exp(2.0 * a * T) / (2.0 * a)
    raise HypothesisError(f"no CG bound applies: need a < b*alpha or (alpha == 0 and a > 0); "
                          f"got alpha={alpha}, a={a}, b={b}")


REGIME_SMALL_B = "|b|<=a*exp(-aT)"
REGIME_MID_B = "a*exp(-aT)<=|b|<=a"
REGIME_LARGE_B = "|b|>=a"
REGIME_BOUNDED_A = "a<=1"


def opt_lower_bound(a: float, b: float, T: float, q0: float, cT: float) -> tuple[str, float]:
    """Case-wise lower bound cT*q0^2*f(a, b) on ecost_opt; cT is caller-supplied."""
    _finite(a=a, b=b, T=T, q0=q0, cT=cT)
    if cT <= 0:
        raise DomainError("cT must be > 0")
    scale = cT * q0 * q0
    bb = abs(b)
    if a >= 1.0:
        if bb >= a:
            return REGIME_LARGE_B, scale / bb
        if bb <= a * math.exp(-a * T):
            if 2.0 * a * T > _EXP_MAX:
                raise NumericOverflow("exp(2aT) overflows")
            return REGIME_SMALL_B, scale * math.exp(2.0 * a * T) / a
        return REGIME_MID_B, scale * a / (bb * bb)
    return REGIME_BOUNDED_A, scale / (1.0 + abs(a) + bb)


def kappa_floor(a: float, b: float, T: float, q0: float) -> float:
    """The exact lower bound q0^2 * kappa(T, b) (the first summand of ecost_opt)."""
    return q0 * q0 * kappa(T, abs(b), a)


def x_process_moments(alpha: float, beta_drift: float, t: float) -> tuple[float, float]:
    """Mean and variance of X(t) = exp(-alpha t) q(t) - Q0 for dq = (alpha q + beta)dt + dW."""
    _finite(alpha=alpha, beta_drift=beta_drift, t=t)
    if t < 0:
        raise DomainError("t must be >= 0")
    y = -alpha * t
    if 2.0 * y > _EXP_MAX:
        raise NumericOverflow(f"exp(-2 alpha t) overflows for alpha={alpha}, t={t}")
    # (1 - exp(-alpha t)) / alpha = t * expm1(y)/y with y = -alpha t
    return beta_drift * t * _g1(y), t * _g1(2.0 * y)


def reflection_sup_prob(alpha: float, t: float, M: float) -> float:
    """P[sup_{s<=t} (X(s) - E X(s)) >= M] = 2 P[X(t) - E X(t) >= M] = erfc(M / (sigma sqrt 2))."""
    _finite(alpha=alpha, t=t, M=M)
    if M <= 0 or t <= 0:
        raise DomainError(f"need M > 0 and t > 0, got M={M}, t={t}")
    _, var = x_process_moments(alpha, 0.0, t)
    sigma = math.sqrt(var)
    if sigma == 0.0:
        raise DomainError("degenerate law: Var[X(t)] = 0")
    return math.erfc(M / (sigma * math.sqrt(2.0)))
