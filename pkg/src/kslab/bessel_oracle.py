"""Modified Bessel functions and the explicit Bessel-process heat kernel.

The radial statistic ``R_t`` of the Keller-Segel particle system is a squared
Bessel process of dimension ``delta = (N-1)(d - nu/2)``; ``sqrt(R_t)`` then has
the transition density

    p(t, x, y) = (y/t) (y/x)^{delta/2-1} exp(-(x^2+y^2)/2t) I_{delta/2-1}(xy/t),   x > 0
    p(t, 0, y) = 2^{1-delta/2} / Gamma(delta/2) * t^{-delta/2} y^{delta-1} exp(-y^2/2t).

This is used as exact ground truth for the simulator.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator
from scipy.stats import kstest

from .core_model import radial_statistic
from .thresholds import bessel_dimension

SERIES_TERMS = 40
ASYMPTOTIC_TERMS = 10
SWITCH_Z = 30.0


class AbsorbedRegimeError(ValueError):
    """delta <= 0: the process is absorbed at 0 and the kernel formula does not apply."""


@dataclass(frozen=True)
class BesselKernelParams:
    delta: float
    t: float
    x0: float
    y: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("t must be positive")
        if self.x0 < 0 or self.y < 0:
            raise ValueError("x0 and y must be nonnegative")


def _check_order(order, z):
    if not order > -1:
        raise ValueError(f"order must be > -1, got {order}")
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z}")


def _series_sum(order, z, n_terms=SERIES_TERMS):
    # sum_k (z/2)^{2k} Gamma(order+1) / (k! Gamma(k+order+1)) as (mantissa, log shift)
    q = 0.25 * z * z
    term = 1.0
    total = 1.0
    shift = 0.0
    for k in range(n_terms - 1):
        term *= q / ((k + 1.0) * (k + 1.0 + order))
        total += term
        if total > 1e200:
            term *= 1e-200
            total *= 1e-200
            shift += 200.0 * math.log(10.0)
        if k + 1 >= SERIES_TERMS and term < 1e-17 * total:
            break
    return total, shift


def _series_log_lead(order, z):
    return order * math.log(z / 2.0) - math.lgamma(order + 1.0)


def _series_scaled(order, z, n_terms=SERIES_TERMS):
    if z == 0.0:
        return 1.0 if order == 0 else 0.0
    total, shift = _series_sum(order, z, n_terms)
    return math.exp(_series_log_lead(order, z) - z + shift) * total


def _asymptotic_scaled(order, z, n_terms=ASYMPTOTIC_TERMS):
    # e^{-z} I_order(z) ~ (2 pi z)^{-1/2} sum_k (-1)^k a_k / z^k, stopped before terms grow
    mu = 4.0 * order * order
    term = 1.0
    total = 1.0
    for k in range(1, n_terms):
        nxt = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * z)
        if abs(nxt) > abs(term):
            return total / math.sqrt(2.0 * math.pi * z), abs(term / total)
        term = nxt
        total += term
    nxt = abs(term * (mu - (2 * n_terms - 1) ** 2) / (n_terms * 8.0 * z))
    return total / math.sqrt(2.0 * math.pi * z), nxt / abs(total)


def _large_z_scaled(order, z):
    val, err = _asymptotic_scaled(order, z)
    if err <= 1e-10:
        return val
    # order^2 comparable to z: carry the expansion to its smallest term, and
    # if that is still not accurate enough sum the power series instead
    val, err = _asymptotic_scaled(order, z, n_terms=200)
    if err <= 1e-10:
        return val
    return _series_scaled(order, z, n_terms=int(4 * z) + 400)


def bessel_I_scaled(order, z):
    """``exp(-z) I_order(z)``, finite for large z."""
    order = float(order)
    z = float(z)
    _check_order(order, z)
    if z <= SWITCH_Z:
        return _series_scaled(order, z)
    return _large_z_scaled(order, z)


def bessel_I(order, z):
    """Modified Bessel function of the first kind ``I_order(z)`` for ``order > -1``, ``z >= 0``.

    A 40-term power series for ``z <= 30`` and a 10-term large-argument
    expansion beyond.  When the order is large enough for the 10-term
    expansion to lose accuracy, it is continued to its smallest term and, if
    still needed, the power series is summed instead.
    """
    order = float(order)
    z = float(z)
    _check_order(order, z)
    if z == 0.0:
        return 1.0 if order == 0 else 0.0
    if z <= SWITCH_Z:
        total, shift = _series_sum(order, z)
        return math.exp(_series_log_lead(order, z) + shift) * total
    return math.exp(z) * _large_z_scaled(order, z)


def _kernel_value(delta, t, x0, y):
    if y == 0.0:
        # density ~ y^{delta-1} near 0
        if delta > 1:
            return 0.0
        if delta < 1:
            return math.inf
    nu = delta / 2.0 - 1.0
    if x0 == 0.0:
        log_p = ((1.0 - delta / 2.0) * math.log(2.0) - math.lgamma(delta / 2.0)
                 - (delta / 2.0) * math.log(t) + (delta - 1.0) * math.log(y) - y * y / (2.0 * t))
        return math.exp(log_p)
    if y == 0.0:
        # delta == 1: limit of the x0 > 0 branch
        return (math.exp(-x0 * x0 / (2.0 * t)) * t ** (-1.0 - nu) * 2.0 ** (-nu)
                / math.gamma(nu + 1.0))
    z = x0 * y / t
    Ie = bessel_I_scaled(nu, z)
    if Ie == 0.0:
        return 0.0
    log_p = (math.log(y / t) + nu * math.log(y / x0) - (x0 - y) ** 2 / (2.0 * t)
             + math.log(Ie))
    return math.exp(log_p)


def bessel_heat_kernel(params=None, *, delta=None, t=None, x0=None, y=None):
    """Transition density of the Bessel process of dimension ``delta`` from ``x0`` to ``y``.

    Accepts a :class:`BesselKernelParams` or the same fields as keywords.
    """
    if params is None:
        params = BesselKernelParams(delta=delta, t=t, x0=x0, y=y)
    if not params.delta > 0:
        raise AbsorbedRegimeError("absorbed regime, kernel formula not applicable (delta <= 0)")
    return _kernel_value(float(params.delta), float(params.t), float(params.x0),
                         float(params.y))


def _upper_limit(delta, t, x0):
    return x0 + math.sqrt(t) * (math.sqrt(delta) + 14.0)


def _quad(f, a, b, tol):
    val, _ = quad(f, a, b, epsabs=tol, epsrel=tol, limit=400)
    return val


def kernel_normalization(delta, t, x0, tol=1e-10):
    """``int_0^inf p(t, x0, y) dy`` by adaptive quadrature."""
    f = lambda y: _kernel_value(delta, t, x0, y)
    top = _upper_limit(delta, t, x0)
    pts = [0.0, x0, top] if 0 < x0 < top else [0.0, top]
    return sum(_quad(f, a, b, tol) for a, b in zip(pts[:-1], pts[1:]))


def chapman_kolmogorov(delta, s, t, x0, y, tol=1e-11):
    """``int_0^inf p(s, x0, z) p(t, z, y) dz`` (should equal ``p(s+t, x0, y)``)."""
    f = lambda z: _kernel_value(delta, s, x0, z) * _kernel_value(delta, t, z, y)
    top = _upper_limit(delta, max(s, t), max(x0, y))
    mids = sorted({0.0, x0, y, top})
    return sum(_quad(f, a, b, tol) for a, b in zip(mids[:-1], mids[1:]))


def kernel_cdf(delta, t, x0, n_grid=2000, tol=1e-10):
    """Vectorized CDF of ``p(t, x0, .)`` on ``[0, inf)``.

    Cell masses are integrated adaptively on a fine grid and accumulated; the
    CDF between nodes is a monotone cubic interpolant.
    """
    if not delta > 0:
        raise AbsorbedRegimeError("absorbed regime, kernel formula not applicable (delta <= 0)")
    top = _upper_limit(delta, t, x0)
    grid = np.linspace(0.0, top, n_grid + 1)
    f = lambda y: _kernel_value(delta, t, x0, y)
    cells = np.array([_quad(f, a, b, tol) for a, b in zip(grid[:-1], grid[1:])])
    F = np.concatenate([[0.0], np.cumsum(cells)])
    interp = PchipInterpolator(grid, F, extrapolate=False)

    def cdf(y):
        y = np.asarray(y, dtype=float)
        out = interp(np.clip(y, 0.0, top))
        out = np.where(y >= top, F[-1], out)
        return np.clip(out, 0.0, 1.0)

    return cdf


def squared_bessel_mean(t, r0, delta):
    """``E[R_t] = r0 + delta t`` for the squared Bessel process started at r0."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return r0 + delta * t


class RadialValidation(NamedTuple):
    mean_gap: float
    ks_distance: Optional[float]
    delta: float
    sample_mean: float
    expected_mean: float
    stderr: float


def validate_radial(ensemble, p=None):
    """Compare the simulated radial statistic with the squared Bessel law.

    Returns the gap ``(mean R_T - (R_0 + delta T)) / stderr`` and the
    Kolmogorov-Smirnov distance of ``sqrt(R_T)`` to the Bessel kernel started
    at ``sqrt(R_0)``.  For ``delta <= 0`` the KS distance is None.
    """
    p = ensemble.params if p is None else p
    if ensemble.spec.drift_kind != "psi":
        raise ValueError("the squared Bessel reduction holds for the psi drift only")
    R0 = radial_statistic(ensemble.initial)
    if not np.allclose(R0, R0[0], rtol=0, atol=0):
        raise ValueError("validate_radial needs a deterministic initial configuration")
    R0 = float(R0[0])
    T = ensemble.spec.t_end
    delta = bessel_dimension(p.N, p.nu, p.d)
    RT = radial_statistic(ensemble.terminal)
    M = RT.size
    mean = float(np.mean(RT))
    se = float(np.std(RT, ddof=1) / math.sqrt(M))
    expected = squared_bessel_mean(T, R0, delta)
    gap = (mean - expected) / se
    ks = None
    if delta > 0:
        cdf = kernel_cdf(delta, T, math.sqrt(R0))
        ks = float(kstest(np.sqrt(RT), cdf).statistic)
    return RadialValidation(mean_gap=float(gap), ks_distance=ks, delta=delta,
                            sample_mean=mean, expected_mean=expected, stderr=se)
