"""Closed-form admissibility thresholds and constants.

Everything here is Gamma functions and elementary algebra: the alpha-form-bound
of the interaction drift, the threshold curves in the attraction strength
``nu``, the Bessel dimension of the radial statistic and the weighted
extrapolation constant.
"""
import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from .core_model import SystemParams


class NoHardyInequalityError(ValueError):
    """alpha = 2 in two dimensions: the Gamma ratio has a pole."""


class NeumannDivergenceError(ValueError):
    """The form-bound is >= 1, so the resolvent series does not converge."""


def gamma_fn(z):
    """Euler Gamma on the positive axis."""
    z = float(z)
    if not z > 0:
        raise ValueError(f"gamma_fn needs z > 0, got {z}")
    return math.gamma(z)


def _check_alpha(alpha, d):
    if d == 2:
        if alpha == 2:
            raise NoHardyInequalityError("no two-dimensional Hardy inequality at alpha = 2")
        if not 1 <= alpha < 2:
            raise ValueError(f"alpha must lie in [1, 2) for d = 2, got {alpha}")
    elif not 1 <= alpha <= 2:
        raise ValueError(f"alpha must lie in [1, 2], got {alpha}")


def log_hardy_gamma_ratio(alpha, d):
    """``log[Gamma((d-alpha)/4)^2 / Gamma((d+alpha)/4)^2]``."""
    return 2.0 * (gammaln((d - alpha) / 4.0) - gammaln((d + alpha) / 4.0))


def fractional_hardy_constant(alpha, d=2):
    """Constant ``C`` in ``<f^2/|x|^alpha> <= C ||(-Delta)^{alpha/4} f||^2`` on R^d.

    ``C = 2^{-alpha} Gamma((d-alpha)/4)^2 / Gamma((d+alpha)/4)^2``.
    """
    return math.exp(-alpha * math.log(2.0) + log_hardy_gamma_ratio(alpha, d))


def _log_threshold(alpha, N, d):
    # log of nu-threshold at alpha; N may be huge so everything stays in logs
    alpha = np.asarray(alpha, dtype=float)
    logN = math.log(N)
    logN1 = math.log(N - 1)
    inner = ((1.5 * alpha - 1.0) * logN - (1.0 + alpha / 2.0) * logN1
             + alpha * math.log(2.0) - log_hardy_gamma_ratio(alpha, d))
    return inner / alpha


def threshold_at_alpha(alpha, N, d=2):
    """Threshold ``[N^{3a/2-1} / (N-1)^{1+a/2} * 2^a * Gamma ratio]^{1/a}`` at one or more alphas."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.exp(_log_threshold(alpha, N, d))
    return float(out) if np.ndim(out) == 0 else out


def delta_form_bound(alpha, p):
    """alpha-form-bound ``delta`` of the interaction drift.

    ``delta = nu^a (N-1)^{1+a/2} / N^{3a/2-1} * 2^{-a} * Gamma((d-a)/4)^2 / Gamma((d+a)/4)^2``;
    ``delta < 1`` exactly when ``nu`` is below ``threshold_at_alpha``.
    """
    _check_alpha(alpha, p.d)
    if p.nu == 0.0:
        return 0.0
    log_delta = alpha * (math.log(p.nu) - float(_log_threshold(alpha, p.N, p.d)))
    return math.exp(log_delta)


@dataclass(frozen=True)
class ThresholdCurve:
    """nu-threshold as a function of alpha, with the admissibility maximum.

    ``max_value``/``argmax_alpha`` are the admissibility threshold as used by
    the theorems.  For d >= 3 that is the alpha = 2 closed form; the curve's
    own maximum over the grid is kept in ``grid_max_value``/``grid_argmax_alpha``
    (they differ only for d = 3, N = 2).
    """

    N: int
    d: int
    alphas: np.ndarray
    values: np.ndarray
    argmax_alpha: float
    max_value: float
    grid_argmax_alpha: float
    grid_max_value: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "nu_max"])
        for a, v in zip(self.alphas, self.values):
            w.writerow([repr(float(a)), repr(float(v))])
        return buf.getvalue()


def alpha_max_closed_form(N, d):
    """alpha = 2 threshold ``2 N/(N-1) Gamma(d/4 + 1/2) / Gamma(d/4 - 1/2)`` for d >= 3."""
    if d < 3:
        raise ValueError("the alpha = 2 closed form needs d >= 3")
    return 2.0 * N / (N - 1) * math.exp(gammaln(d / 4 + 0.5) - gammaln(d / 4 - 0.5))


def nu_max(N, d=2, step=1e-3):
    """Threshold curve over alpha in [1, 2) (d = 2) or [1, 2] (d >= 3) and its maximizer.

    The grid argmax is refined by bounded scalar minimization to 1e-9 in alpha
    and the refined point is inserted into the returned grid.
    """
    if int(N) != N or N < 2:
        raise ValueError(f"N must be an integer >= 2, got {N!r}")
    if int(d) != d or d < 2:
        raise ValueError(f"d must be an integer >= 2, got {d!r}")
    if not 0 < step <= 1e-3:
        raise ValueError("alpha grid step must lie in (0, 1e-3]")
    n = int(round(1.0 / step))
    alphas = 1.0 + np.arange(n + 1) * (1.0 / n)
    if d == 2:
        alphas = alphas[:-1]
    values = threshold_at_alpha(alphas, N, d)
    k = int(np.argmax(values))
    hi = alphas[-1] if d == 2 else 2.0
    lo_b, hi_b = max(1.0, alphas[k] - step), min(hi, alphas[k] + step)
    best_a, best_v = float(alphas[k]), float(values[k])
    if hi_b > lo_b:
        res = minimize_scalar(lambda a: -float(_log_threshold(a, N, d)),
                              bounds=(lo_b, hi_b), method="bounded",
                              options={"xatol": 1e-9})
        v = threshold_at_alpha(res.x, N, d)
        if v > best_v:
            best_a, best_v = float(res.x), float(v)
            # keep the maximizer on the reported grid
            pos = int(np.searchsorted(alphas, best_a))
            alphas = np.insert(alphas, pos, best_a)
            values = np.insert(values, pos, best_v)
    if d >= 3:
        arg, mx = 2.0, alpha_max_closed_form(N, d)
    else:
        arg, mx = best_a, best_v
    return ThresholdCurve(N=int(N), d=int(d), alphas=alphas, values=values,
                          argmax_alpha=arg, max_value=mx,
                          grid_argmax_alpha=best_a, grid_max_value=best_v)


def nu_max_theorem2(d):
    """Attraction threshold of the Gaussian-weighted bound: sqrt(2) for d = 3, 2(d-2) for d >= 4."""
    if d < 3:
        raise ValueError("needs d >= 3")
    return math.sqrt(2.0) if d == 3 else 2.0 * (d - 2)


def sobolev_exponent(N, d):
    """``ell = dN / (dN - 2)``."""
    return d * N / (d * N - 2.0)


def kappa_max_lemma(N, d):
    """kappa threshold of the weighted Sobolev inequality.

    ``8 ell^2 N/(N-1)`` for d = 3 and ``16 ell^2`` for d >= 4, with ``ell = dN/(dN-2)``.
    """
    if d < 3 or N < 2:
        raise ValueError("needs d >= 3 and N >= 2")
    ell = sobolev_exponent(N, d)
    return 8.0 * ell**2 * N / (N - 1) if d == 3 else 16.0 * ell**2


def nu_from_kappa(kappa, d):
    return math.sqrt(kappa) * (d - 2) / 2.0


def kappa_from_nu(nu, d):
    return (2.0 * nu / (d - 2)) ** 2


def operator_norm_chain(alpha, delta):
    """Bounds ``(sqrt(delta), delta^{(2-a)/(2a)}, delta^{1/a})`` on the resolvent factors."""
    if not 1 <= alpha <= 2:
        raise ValueError(f"alpha must lie in [1, 2], got {alpha}")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta >= 1:
        raise NeumannDivergenceError(f"delta = {delta} >= 1: Neumann series diverges")
    norm_r = math.sqrt(delta)
    expo = (2.0 - alpha) / (2.0 * alpha)
    norm_q = 1.0 if expo == 0 else delta**expo
    norm_t = delta ** (1.0 / alpha)
    if not norm_t < 1:
        raise AssertionError("normT must be < 1")
    return norm_r, norm_q, norm_t


def bessel_dimension(N, nu, d=2):
    """Dimension ``(N-1)(d - nu/2)`` of the squared Bessel process ``R_t``.

    With the default d = 2 this is ``(N-1)(2 - nu/2)``.
    """
    if N < 2:
        raise ValueError("needs N >= 2")
    return (N - 1) * (d - nu / 2.0)


def blows_up(N, nu, d=2):
    """True when the radial statistic is absorbed at 0, i.e. ``nu >= 2d`` (``nu >= 4`` in the plane)."""
    return bessel_dimension(N, nu, d) <= 0


def extrapolation_constant(p, q, r, nu_exp, M1, M2):
    """``beta = (r/q)(q-p)/(r-p)`` and ``M = 2^{nu/(1-beta)^2} M1 M2^{1/(1-beta)}``.

    ``r = math.inf`` is the exact limit ``beta = (q-p)/q``.
    """
    if not (1 <= p < q < r):
        raise ValueError("need 1 <= p < q < r <= inf")
    if not (nu_exp > 0 and M1 > 0 and M2 > 0):
        raise ValueError("nu_exp, M1, M2 must be positive")
    beta = (q - p) / q if math.isinf(r) else (r / q) * (q - p) / (r - p)
    M = 2.0 ** (nu_exp / (1.0 - beta) ** 2) * M1 * M2 ** (1.0 / (1.0 - beta))
    return beta, M


def threshold_params(N, d, fraction, epsilon=0.0):
    """SystemParams with ``nu = fraction * nu_max(N, d).max_value``."""
    return SystemParams(d=d, N=N, nu=fraction * nu_max(N, d).max_value, epsilon=epsilon)
