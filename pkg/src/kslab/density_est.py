"""Monte Carlo estimates of the transition density and fits of weighted upper bounds.

The estimator is a product Gaussian kernel density estimate in R^{dN}.  For
stopped ensembles only the trajectories still inside ``D_R`` contribute, each
with weight ``1/M``, so the estimate is the sub-probability density of the
killed process.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core_model import SystemParams, as_configuration, log_phi_eps, phi_eps

BOUND_KINDS = ("thm1", "thm2", "thm3")
MIN_SAMPLES = 1000


@dataclass(frozen=True)
class DensityEstimate:
    """Density estimate at a set of query configurations.

    Attributes
    ----------
    query_points : ndarray, shape (Q, N, d)
    values : ndarray, shape (Q,)
    bandwidth : ndarray, shape (dN,)
        Per-coordinate kernel width.
    M : int
        Number of trajectories (including stopped ones).
    stderr : ndarray, shape (Q,)
    order : int
        Kernel order, 2 (Gaussian) or 4 (bias-reduced).
    """

    query_points: np.ndarray
    values: np.ndarray
    bandwidth: np.ndarray
    M: int
    stderr: np.ndarray
    order: int = 2
    t: float = math.nan


@dataclass(frozen=True)
class BoundFit:
    kind: str
    fitted_constant: float
    fitted_c4: Optional[float]
    sup_point: np.ndarray
    sup_index: int
    ratios: np.ndarray
    shape: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def to_json(self):
        return json.dumps({
            "kind": self.kind, "fitted_constant": self.fitted_constant,
            "fitted_c4": self.fitted_c4, "sup_index": self.sup_index,
            "sup_point": np.asarray(self.sup_point).ravel().tolist(),
            "n_excluded": int(np.sum(self.excluded)),
        }, sort_keys=True)


def silverman_bandwidth(samples):
    """``sd_c * M^{-1/(D+4)}`` per coordinate."""
    M, D = samples.shape
    sd = np.std(samples, axis=0, ddof=1)
    return sd * M ** (-1.0 / (D + 4))


def _kernel_sums(samples, query, h, order, chunk):
    # sums of K and K^2 over samples for each query point
    Q, D = query.shape
    s1 = np.zeros(Q)
    s2 = np.zeros(Q)
    qs = query / h
    norm = (2.0 * math.pi) ** (-D / 2) / np.prod(h)
    for a in range(0, samples.shape[0], chunk):
        xs = samples[a:a + chunk] / h
        d2 = (np.sum(qs**2, axis=1)[:, None] + np.sum(xs**2, axis=1)[None, :]
              - 2.0 * qs @ xs.T)
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-0.5 * d2)
        if order == 4:
            # 2 K_h - K_{sqrt2 h} cancels the h^2 bias term
            k = 2.0 * k - 2.0 ** (-D / 2) * np.exp(-0.25 * d2)
        k *= norm
        s1 += k.sum(axis=1)
        s2 += (k * k).sum(axis=1)
    return s1, s2


def estimate_density(ensemble, t, query, bandwidth=None, order=2, chunk=8192):
    """Kernel density estimate of the terminal law at ``query``.

    Parameters
    ----------
    ensemble : Ensemble
    t : float
        Must equal the ensemble horizon.
    query : array_like, shape (Q, N, d) or (Q, dN)
    bandwidth : float or array_like, optional
        Kernel width (scalar or per coordinate).  Defaults to Silverman's rule
        ``sd_c * M^{-1/(dN+4)}``.
    order : {2, 4}
        4 uses the bias-reduced kernel ``2 K_h - K_{sqrt2 h}``; negative
        estimates are clipped at 0.

    Notes
    -----
    ``stderr`` is the sample standard deviation of the kernel contributions
    divided by ``sqrt(M)``.
    """
    p = ensemble.params
    if not math.isclose(ensemble.spec.t_end, t, rel_tol=1e-12):
        raise ValueError(f"ensemble horizon {ensemble.spec.t_end} differs from t = {t}")
    M = ensemble.M
    if M < MIN_SAMPLES:
        raise ValueError(f"need M >= {MIN_SAMPLES} samples, got {M}")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    alive = ensemble.terminal[~ensemble.stopped].reshape(-1, p.dim)
    query = as_configuration(np.asarray(query, dtype=float), p).reshape(-1, p.N, p.d)
    if bandwidth is None:
        h = silverman_bandwidth(alive)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (p.dim,)).copy()
    if not np.all(h > 0):
        raise ValueError("bandwidth must be positive")
    s1, s2 = _kernel_sums(alive, query.reshape(-1, p.dim), h, order, chunk)
    mean = s1 / M
    var = np.maximum(s2 / M - mean**2, 0.0)
    return DensityEstimate(query_points=query, values=np.maximum(mean, 0.0), bandwidth=h,
                           M=M, stderr=np.sqrt(var / M), order=order, t=float(t))


def _histogram(ensemble, bins):
    p = ensemble.params
    if p.dim > 4:
        raise ValueError("histogram estimator only for dN <= 4")
    alive = ensemble.terminal[~ensemble.stopped].reshape(-1, p.dim)
    lo = alive.min(axis=0)
    hi = alive.max(axis=0)
    pad = 1e-9 * np.maximum(hi - lo, 1.0)
    edges = [np.linspace(lo[c] - pad[c], hi[c] + pad[c], bins + 1) for c in range(p.dim)]
    counts, edges = np.histogramdd(alive, bins=edges)
    vol = np.prod([e[1] - e[0] for e in edges])
    return counts, edges, vol


def histogram_density(ensemble, bins=8):
    """Histogram estimate on a box covering all surviving samples (dN <= 4).

    Returns ``(density, edges)``.
    """
    counts, edges, vol = _histogram(ensemble, bins)
    return counts / (ensemble.M * vol), edges


def histogram_mass(ensemble, bins=8):
    """Total histogram mass, i.e. the binned sample count over M (1 when nothing stopped)."""
    counts, _, _ = _histogram(ensemble, bins)
    return float(counts.sum()) / ensemble.M


def surviving_mass(ensemble):
    """Mass of the killed law on ``D_R``: fraction of trajectories not stopped."""
    return float(np.mean(~ensemble.stopped))


def lattice(center, half_width, n):
    """Product lattice of ``n`` points per coordinate around ``center`` (shape ``(n^D, D)``)."""
    center = np.asarray(center, dtype=float).ravel()
    axis = np.linspace(-half_width, half_width, n)
    grids = np.meshgrid(*([axis] * center.size), indexing="ij")
    return center + np.stack([g.ravel() for g in grids], axis=1)


def kde_grid_mass(ensemble, half_width, n, center=None, order=2):
    """Riemann sum of the KDE over a lattice (midpoint cells of width ``2 half_width / (n-1)``)."""
    p = ensemble.params
    if center is None:
        center = np.mean(ensemble.terminal, axis=0)
    pts = lattice(center, half_width, n)
    est = estimate_density(ensemble, ensemble.spec.t_end, pts, order=order)
    cell = (2.0 * half_width / (n - 1)) ** p.dim
    return float(est.values.sum() * cell)


def transect(center, i, j, offsets, axis=0):
    """Configurations moving particles i and j across their collision hyperplane.

    The pair keeps the midpoint of ``center[i], center[j]`` and has relative
    displacement ``offset * e_axis``; other particles stay at ``center``.
    """
    center = np.asarray(center, dtype=float)
    mid = 0.5 * (center[i] + center[j])
    out = np.repeat(center[None], len(offsets), axis=0)
    for k, s in enumerate(offsets):
        e = np.zeros(center.shape[1])
        e[axis] = 0.5 * s
        out[k, i] = mid + e
        out[k, j] = mid - e
    return out


def gaussian_reference(t, x, y, dN=None):
    """Gaussian kernel ``Gamma_t(x - y) = (4 pi t)^{-dN/2} exp(-|x-y|^2 / 4t)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float).ravel()
    if dN is None:
        dN = x.size
    if x.size != dN:
        raise ValueError("x must be a single configuration with dN coordinates")
    y = np.asarray(y, dtype=float)
    y = y.ravel() if y.size == dN else y.reshape(-1, dN)
    r2 = np.sum((y - x) ** 2, axis=-1)
    val = (4.0 * math.pi * t) ** (-dN / 2.0) * np.exp(-r2 / (4.0 * t))
    return float(val) if np.ndim(val) == 0 else val


def _phi_and_flags(y, p):
    lphi = log_phi_eps(y, p)
    _, overflow = phi_eps(y, p, with_flag=True)
    return lphi, np.atleast_1d(overflow)


def _bound_shape(kind, est, t, p, x, c4=None):
    y = est.query_points
    lphi, overflow = _phi_and_flags(y, p)
    if kind == "thm1":
        log_shape = -p.N * math.log(t) + lphi
    elif kind == "thm3":
        log_shape = -(p.dim / 2.0) * math.log(t) + lphi
    else:
        xx = as_configuration(np.asarray(x, dtype=float), p)
        r2 = np.sum((y - xx).reshape(len(y), -1) ** 2, axis=-1)
        log_shape = (-(p.dim / 2.0) * math.log(4.0 * math.pi * c4 * t)
                     - r2 / (4.0 * c4 * t) + lphi)
    return np.atleast_1d(log_shape), overflow


def _sup_ratio(est, log_shape, overflow):
    with np.errstate(divide="ignore"):
        log_ratio = np.log(est.values) - log_shape
    log_ratio = np.where(overflow, -np.inf, log_ratio)
    k = int(np.argmax(log_ratio))
    return math.exp(log_ratio[k]) if np.isfinite(log_ratio[k]) else 0.0, k, np.exp(log_ratio)


def fit_bound(est, t, p, kind, x=None, c4_candidates=(2.0, 4.0, 8.0, 16.0)):
    """Smallest constant making ``p_hat <= C * shape`` at every query point.

    Shapes: ``thm1`` ``t^{-N} phi_eps(y)`` (d = 2), ``thm3`` ``t^{-dN/2} phi_eps(y)``
    (d >= 3), ``thm2`` ``Gamma_{c4 t}(x - y) phi_eps(y)`` (d >= 3) with ``c4``
    chosen from ``c4_candidates`` to minimize the fitted constant.  Points where
    ``phi_eps`` overflows are excluded and flagged.
    """
    if kind not in BOUND_KINDS:
        raise ValueError(f"kind must be one of {BOUND_KINDS}")
    if kind == "thm1" and p.d != 2:
        raise ValueError("thm1 bound is for d = 2")
    if kind in ("thm2", "thm3") and p.d < 3:
        raise ValueError(f"{kind} bound is for d >= 3")
    if kind == "thm2" and x is None:
        raise ValueError("thm2 needs the starting point x")
    if not t > 0:
        raise ValueError("t must be positive")
    cands = list(c4_candidates) if kind == "thm2" else [None]
    best = None
    for c4 in cands:
        log_shape, overflow = _bound_shape(kind, est, t, p, x, c4)
        C, k, ratios = _sup_ratio(est, log_shape, overflow)
        if best is None or C < best[0]:
            best = (C, k, ratios, c4, log_shape, overflow)
    C, k, ratios, c4, log_shape, overflow = best
    with np.errstate(over="ignore"):
        shape = np.exp(log_shape)
    if not math.isfinite(C):
        raise ArithmeticError("fitted constant is not finite")
    return BoundFit(kind=kind, fitted_constant=C, fitted_c4=c4,
                    sup_point=est.query_points[k], sup_index=k, ratios=ratios,
                    shape=shape, excluded=overflow)


def bound_holds(est, fit, constant, n_se=3.0):
    """One-sided check ``p_hat - n_se * stderr <= constant * shape`` at all included points."""
    ok = est.values - n_se * est.stderr <= constant * fit.shape
    return bool(np.all(ok | fit.excluded))


def weighted_kernel(est, p):
    """Empirical ``q_hat = p_hat / phi_eps`` at the query points."""
    return est.values * np.exp(-np.atleast_1d(log_phi_eps(est.query_points, p)))


def estimate_to_csv(est, p, fit=None, header=None):
    """CSV with the query coordinates, ``p_hat``, ``stderr``, ``phi_eps`` and ``ratio``.

    ``ratio`` is ``p_hat / shape`` for a given fit and ``p_hat / phi_eps`` otherwise.
    """
    buf = io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"y{c}" for c in range(p.dim)] + ["p_hat", "stderr", "phi_eps", "ratio"])
    phi = np.atleast_1d(phi_eps(est.query_points, p))
    ratio = fit.ratios if fit is not None else weighted_kernel(est, p)
    for k, y in enumerate(est.query_points.reshape(len(est.values), -1)):
        w.writerow([repr(float(v)) for v in y]
                   + [repr(float(est.values[k])), repr(float(est.stderr[k])),
                      repr(float(phi[k])), repr(float(ratio[k]))])
    return buf.getvalue()
