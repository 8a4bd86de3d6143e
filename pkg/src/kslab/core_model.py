"""Weights, drifts and pointwise diagnostics of the Keller-Segel particle system.

A configuration is an array of shape ``(..., N, d)``: the last two axes hold
the particle blocks ``x^1, ..., x^N``.  Leading axes are batch axes, so every
evaluator here works on a single configuration or on a stack of them.

All weight arithmetic is done in the log domain: near a collision the
product ``psi_eps`` spans hundreds of orders of magnitude.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

_LOG_FLOAT_MAX = np.log(np.finfo(float).max)


class SingularConfigurationError(ValueError):
    """Two particles coincide while the regularization is switched off."""


class MajorantInfiniteError(ValueError):
    """The unregularized drift majorant is infinite at a collision."""


@dataclass(frozen=True)
class SystemParams:
    """Physical and regularization parameters ``(d, N, nu, epsilon)``."""

    d: int
    N: int
    nu: float
    epsilon: float = 0.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"d must be an integer >= 2, got {self.d!r}")
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")
        if not np.isfinite(self.nu) or self.nu < 0:
            raise ValueError(f"nu must be finite and >= 0, got {self.nu!r}")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def pair_exponent(self):
        """Exponent ``nu/N`` carried by each ``|x^i - x^j|``."""
        return self.nu / self.N

    @property
    def scaling_exponent(self):
        """``nu (N-1) / 2``: homogeneity degree of ``-log psi`` under dilation."""
        return self.nu * (self.N - 1) / 2.0

    @property
    def dim(self):
        return self.d * self.N

    def replace(self, **changes):
        fields = {"d": self.d, "N": self.N, "nu": self.nu, "epsilon": self.epsilon}
        fields.update(changes)
        return SystemParams(**fields)


def as_configuration(x, p):
    """Reshape ``x`` (flat ``d*N`` vector or ``(N, d)`` blocks, possibly batched) to ``(..., N, d)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] == (p.N, p.d):
        return x
    if x.shape[-1] == p.N * p.d:
        return x.reshape(x.shape[:-1] + (p.N, p.d))
    raise ValueError(f"configuration of shape {x.shape} does not match N={p.N}, d={p.d}")


def pair_indices(N):
    """Index arrays ``(I, J)`` of the pairs ``i < j`` in row-major order."""
    return np.triu_indices(N, k=1)


@dataclass(frozen=True)
class PairDistances:
    """Squared pair distances above the diagonal, plain and regularized."""

    r2: np.ndarray
    r2eps: np.ndarray
    diff: np.ndarray
    I: np.ndarray
    J: np.ndarray


def pair_distances(x, epsilon=0.0):
    x = np.asarray(x, dtype=float)
    I, J = pair_indices(x.shape[-2])
    diff = x[..., I, :] - x[..., J, :]
    r2 = np.einsum("...k,...k->...", diff, diff)
    return PairDistances(r2=r2, r2eps=r2 + epsilon, diff=diff, I=I, J=J)


def _pairs(x, p, need_regularized=False):
    x = as_configuration(x, p)
    pd = pair_distances(x, p.epsilon)
    # with nu = 0 the weights are constant and the drift vanishes everywhere
    if p.epsilon == 0.0 and p.nu != 0.0 and np.any(pd.r2 == 0.0):
        if need_regularized:
            raise ValueError("epsilon = 0 is unsupported here: the closed form needs |.|_eps")
        raise SingularConfigurationError("coincident particles with epsilon = 0")
    return x, pd


def _log_psi_from_pairs(pd, p):
    if p.nu == 0.0:
        return np.zeros(pd.r2.shape[:-1])[()]
    return -(p.nu / (2.0 * p.N)) * np.sum(np.log(pd.r2eps), axis=-1)


def log_psi_eps(x, p):
    """``log psi_eps(x) = -(nu / 2N) * sum_{i<j} log(|x^i - x^j|^2 + eps)``."""
    _, pd = _pairs(x, p)
    return _log_psi_from_pairs(pd, p)


def log_phi_eps(x, p):
    """``log(psi_eps + 1)``, finite even where ``psi_eps`` overflows."""
    return np.logaddexp(log_psi_eps(x, p), 0.0)


def phi_eps(x, p, with_flag=False):
    """Weight ``phi_eps = psi_eps + 1``.

    Where ``psi_eps`` exceeds the floating range the largest finite double is
    returned; ``with_flag=True`` additionally returns a boolean overflow mask.
    """
    lphi = log_phi_eps(x, p)
    overflow = lphi >= _LOG_FLOAT_MAX
    value = np.exp(np.minimum(lphi, _LOG_FLOAT_MAX))
    value = np.where(overflow, np.finfo(float).max, value)
    if np.ndim(value) == 0:
        value, overflow = float(value), bool(overflow)
    if with_flag:
        return value, overflow
    return value


def _psi_drift_from_pairs(x, pd, p):
    if p.nu == 0.0:
        return np.zeros_like(x)
    coef = -(p.nu / p.N) / pd.r2eps
    contrib = pd.diff * coef[..., None]
    b = np.zeros_like(x)
    for k, (i, j) in enumerate(zip(pd.I, pd.J)):
        b[..., i, :] += contrib[..., k, :]
        b[..., j, :] -= contrib[..., k, :]
    return b


def drift_psi(x, p):
    """Keller-Segel drift ``grad psi_eps / psi_eps`` as ``(..., N, d)`` blocks."""
    x, pd = _pairs(x, p)
    return _psi_drift_from_pairs(x, pd, p)


def drift_phi(x, p):
    """Modified drift ``grad phi_eps / phi_eps = sigmoid(log psi_eps) * drift_psi``."""
    x, pd = _pairs(x, p)
    factor = expit(_log_psi_from_pairs(pd, p))
    return _psi_drift_from_pairs(x, pd, p) * np.asarray(factor)[..., None, None]


def drift_bound_eps(p):
    """Global bound ``nu (N-1) / (2 N sqrt(eps))`` on every drift block (infinite at eps = 0)."""
    if p.nu == 0.0:
        return 0.0
    if p.epsilon == 0.0:
        return np.inf
    return p.nu * (p.N - 1) / (2.0 * p.N * np.sqrt(p.epsilon))


def drift_majorant(x, p):
    """Per-block majorant ``(nu/N) * sum_{j != i} 1/|x^i - x^j|`` of both drifts.

    The bound is checked against ``drift_phi`` and ``drift_psi`` before it is
    returned.
    """
    x = as_configuration(x, p)
    pd = pair_distances(x, p.epsilon)
    if np.any(pd.r2 == 0.0):
        raise MajorantInfiniteError("majorant is infinite at a collision")
    inv = 1.0 / np.sqrt(pd.r2)
    bound = np.zeros(x.shape[:-1])
    for k, (i, j) in enumerate(zip(pd.I, pd.J)):
        bound[..., i] += inv[..., k]
        bound[..., j] += inv[..., k]
    bound *= p.nu / p.N
    slack = 1.0 + 1e-12
    for b in (drift_psi(x, p), drift_phi(x, p)):
        norms = np.linalg.norm(b, axis=-1)
        if np.any(norms > bound * slack):
            raise AssertionError("drift block exceeds its majorant")
    return bound


class PotentialValue(NamedTuple):
    U: float
    divergence: float
    bound: float


def potential_U(x, p):
    """Potential ``U_eps = div(grad psi_eps / psi_eps) / (psi_eps + 1)`` and its pointwise bound.

    Returns ``(U, divergence, bound)`` where ``|divergence| <= bound`` with
    ``bound = (d nu / N) * sum_i sum_{j != i} 1 / |x^i - x^j|_eps^2``.
    """
    if p.epsilon <= 0.0:
        raise ValueError("potential_U needs epsilon > 0")
    x, pd = _pairs(x, p, need_regularized=True)
    bracket = p.d / pd.r2eps - 2.0 * pd.r2 / pd.r2eps**2
    # ordered pairs: each unordered pair appears twice
    div = -(p.nu / p.N) * 2.0 * np.sum(bracket, axis=-1)
    bound = (p.d * p.nu / p.N) * 2.0 * np.sum(1.0 / pd.r2eps, axis=-1)
    if np.any(np.abs(div) > bound * (1 + 1e-12)):
        raise AssertionError("divergence exceeds its pointwise bound")
    # 1/(psi+1) = sigmoid(-log psi)
    U = expit(-_log_psi_from_pairs(pd, p)) * div
    if np.ndim(U) == 0:
        return PotentialValue(float(U), float(div), float(bound))
    return PotentialValue(U, div, bound)


def radial_statistic(x):
    """``R = (1 / 4N) * sum_{i,j} |x^i - x^j|^2`` over the full double sum."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-2]
    pd = pair_distances(x)
    R = 2.0 * np.sum(pd.r2, axis=-1) / (4.0 * N)
    return float(R) if np.ndim(R) == 0 else R


def min_pair_distance(x):
    pd = pair_distances(np.asarray(x, dtype=float))
    m = np.sqrt(np.min(pd.r2, axis=-1))
    return float(m) if np.ndim(m) == 0 else m


def max_pair_distance(x):
    pd = pair_distances(np.asarray(x, dtype=float))
    m = np.sqrt(np.max(pd.r2, axis=-1))
    return float(m) if np.ndim(m) == 0 else m
