"""Euler-Maruyama simulation of the regularized particle SDEs.

Two drifts are available: ``"psi"`` (the Keller-Segel drift
``grad psi_eps / psi_eps``) and ``"phi"`` (the modified drift
``grad phi_eps / phi_eps``).  Trajectories are independent work items; each
one draws its noise from the counter-based stream keyed by
``(seed, trajectory, step, coordinate)``, so results do not depend on how
trajectories are scheduled across threads.
"""
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numba
import numpy as np

# the bundled TBB is too old for numba and only produces a warning
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "omp"
from numba import prange

from . import __version__
from .core_model import (SystemParams, as_configuration, drift_bound_eps, drift_phi,
                         drift_psi, max_pair_distance, radial_statistic)
from .rng import INITIAL_STEP, keyed_normals, normal_pair

DRIFT_KINDS = ("phi", "psi")
_OK, _NONFINITE, _SINGULAR = 0, 1, 2


class NumericalDivergenceError(FloatingPointError):
    def __init__(self, trajectory, step, reason="non-finite state"):
        super().__init__(f"trajectory {trajectory}: {reason} at step {step}")
        self.trajectory = trajectory
        self.step = step


@dataclass(frozen=True)
class GaussianCloud:
    """Initial law: ``center + spread * Z`` with Z standard normal in R^{dN}."""

    center: tuple
    spread: float


@dataclass(frozen=True)
class SimSpec:
    dt: float
    t_end: float
    drift_kind: str = "psi"
    taming_cap: Optional[float] = None
    seed: int = 0
    initial: object = None

    def __post_init__(self):
        if not (self.dt > 0 and self.t_end > 0 and self.dt <= self.t_end):
            raise ValueError("need 0 < dt <= t_end")
        if self.drift_kind not in DRIFT_KINDS:
            raise ValueError(f"drift_kind must be one of {DRIFT_KINDS}")
        if self.taming_cap is not None and not (0 < self.taming_cap < math.inf):
            raise ValueError("taming_cap must be finite and positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.initial is None:
            raise ValueError("initial condition is required")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def cap(self, p):
        """Block drift cap; defaults to the analytic bound, i.e. no taming."""
        if self.taming_cap is not None:
            return float(self.taming_cap)
        return float(drift_bound_eps(p))

    def to_dict(self):
        init = self.initial
        if isinstance(init, GaussianCloud):
            init = {"gaussian_cloud": {"center": np.asarray(init.center).tolist(),
                                       "spread": init.spread}}
        else:
            init = {"point": np.asarray(init).tolist()}
        return {"dt": self.dt, "t_end": self.t_end, "drift_kind": self.drift_kind,
                "taming_cap": self.taming_cap, "seed": int(self.seed), "initial": init}

    @classmethod
    def from_dict(cls, dct):
        dct = dict(dct)
        init = dct.pop("initial")
        if "gaussian_cloud" in init:
            g = init["gaussian_cloud"]
            init = GaussianCloud(tuple(map(tuple, g["center"])), float(g["spread"]))
        else:
            init = np.asarray(init["point"], dtype=float)
        return cls(initial=init, **dct)


def default_dt(p):
    """Step-size guidance ``min(eps, 1e-3)`` (``1e-3`` when eps = 0)."""
    return min(p.epsilon, 1e-3) if p.epsilon > 0 else 1e-3


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: Optional[np.ndarray]
    r_path: np.ndarray
    min_pair_dist: np.ndarray
    stopped_at: Optional[float]
    absorbed: bool


@dataclass
class Ensemble:
    params: SystemParams
    spec: SimSpec
    M: int
    initial: np.ndarray
    terminal: np.ndarray
    stopped_step: np.ndarray
    stop_radius: float = math.inf
    record_times: Optional[np.ndarray] = None
    r_path: Optional[np.ndarray] = None
    min_pair_dist: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def stopped(self):
        return self.stopped_step >= 0

    @property
    def stopped_at(self):
        t = self.stopped_step * self.spec.dt
        return np.where(self.stopped, t, np.nan)

    @property
    def surviving(self):
        return ~self.stopped

    def radial(self, which="terminal"):
        return radial_statistic(self.terminal if which == "terminal" else self.initial)

    def record(self, m, floor=0.01):
        if self.r_path is None:
            raise ValueError("ensemble was simulated without records")
        R0 = radial_statistic(self.initial[m])
        RT = radial_statistic(self.terminal[m])
        return TrajectoryRecord(
            times=self.record_times,
            states=None if self.states is None else self.states[m],
            r_path=self.r_path[m], min_pair_dist=self.min_pair_dist[m],
            stopped_at=float(self.stopped_at[m]) if self.stopped[m] else None,
            absorbed=bool(RT < floor * R0))


@numba.njit(cache=True, inline="always")
def _drift_into(x, nu, eps, use_phi, cap, b):
    N, d = x.shape
    for i in range(N):
        for c in range(d):
            b[i, c] = 0.0
    logsum = 0.0
    for i in range(N):
        for j in range(i + 1, N):
            r2 = 0.0
            for c in range(d):
                t = x[i, c] - x[j, c]
                r2 += t * t
            if r2 == 0.0 and eps == 0.0:
                return False
            r2e = r2 + eps
            coef = -(nu / N) / r2e
            for c in range(d):
                t = coef * (x[i, c] - x[j, c])
                b[i, c] += t
                b[j, c] -= t
            if use_phi:
                logsum += math.log(r2e)
    if use_phi:
        lpsi = -(nu / (2.0 * N)) * logsum
        if lpsi >= 0:
            f = 1.0 / (1.0 + math.exp(-lpsi))
        else:
            e = math.exp(lpsi)
            f = e / (1.0 + e)
        for i in range(N):
            for c in range(d):
                b[i, c] *= f
    if cap < math.inf:
        for i in range(N):
            nb = 0.0
            for c in range(d):
                nb += b[i, c] * b[i, c]
            nb = math.sqrt(nb)
            if nb > cap:
                s = cap / nb
                for c in range(d):
                    b[i, c] *= s
    return True


@numba.njit(cache=True, inline="always")
def _radial_and_pairs(x):
    N, d = x.shape
    tot = 0.0
    mn = math.inf
    mx = 0.0
    for i in range(N):
        for j in range(i + 1, N):
            r2 = 0.0
            for c in range(d):
                t = x[i, c] - x[j, c]
                r2 += t * t
            tot += r2
            if r2 < mn:
                mn = r2
            if r2 > mx:
                mx = r2
    return tot / (2.0 * N), math.sqrt(mn), mx


@numba.njit(parallel=True, cache=True)
def _simulate_kernel(x0, nu, eps, dt, n_steps, use_phi, cap, seed, traj_offset,
                     r2_stop, rec_stride, keymap, out_x, out_stop, out_status,
                     out_rpath, out_minpd, out_states):
    M, N, d = x0.shape
    nd = N * d
    nblk = (nd + 1) // 2
    sq = math.sqrt(2.0 * dt)
    nrec = out_rpath.shape[1]
    keep_states = out_states.shape[1] > 0
    for m in prange(M):
        x = x0[m].copy()
        b = np.empty((N, d))
        z = np.empty(nblk * 2)
        traj = traj_offset + m
        stop = -1
        status = _OK
        bad_step = -1
        if nrec > 0:
            R, mn, _ = _radial_and_pairs(x)
            out_rpath[m, 0] = R
            out_minpd[m, 0] = mn
            if keep_states:
                out_states[m, 0] = x
        rec = 1
        for k in range(n_steps):
            for q in range(nblk):
                z0, z1 = normal_pair(seed, traj, k, q)
                z[2 * q] = z0
                z[2 * q + 1] = z1
            if not _drift_into(x, nu, eps, use_phi, cap, b):
                status = _SINGULAR
                bad_step = k
                break
            finite = True
            for i in range(N):
                base = keymap[i] * d
                for c in range(d):
                    v = x[i, c] + b[i, c] * dt + sq * z[base + c]
                    x[i, c] = v
                    if not math.isfinite(v):
                        finite = False
            if not finite:
                status = _NONFINITE
                bad_step = k
                break
            hit = False
            if r2_stop < math.inf:
                _, _, mx = _radial_and_pairs(x)
                if mx >= r2_stop:
                    hit = True
            if nrec > 0 and rec < nrec and ((k + 1) % rec_stride == 0 or hit):
                R, mn, _ = _radial_and_pairs(x)
                # a stopped trajectory stays frozen for the remaining samples
                last = nrec if hit else rec + 1
                for r in range(rec, last):
                    out_rpath[m, r] = R
                    out_minpd[m, r] = mn
                    if keep_states:
                        out_states[m, r] = x
                rec = last
            if hit:
                stop = k + 1
                break
        out_x[m] = x
        out_stop[m] = stop
        out_status[m, 0] = status
        out_status[m, 1] = bad_step


def set_threads(n):
    """Set the numba worker count (clipped to the configured maximum)."""
    if n is None:
        env = os.environ.get("KSLAB_THREADS")
        if env is None:
            return
        n = int(env)
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def initial_states(p, spec, M, traj_offset=0):
    """Initial configurations ``(M, N, d)``; Gaussian clouds draw from the reserved step."""
    init = spec.initial
    if isinstance(init, GaussianCloud):
        center = as_configuration(np.asarray(init.center, dtype=float), p)
        out = np.empty((M, p.N, p.d))
        for m in range(M):
            z = keyed_normals(spec.seed, traj_offset + m, INITIAL_STEP, p.dim)
            out[m] = center + init.spread * z.reshape(p.N, p.d)
        return out
    x = as_configuration(np.asarray(init, dtype=float), p)
    return np.broadcast_to(x, (M, p.N, p.d)).copy()


def step(x, p, spec, noise):
    """One Euler-Maruyama step ``x + b(x) dt + sqrt(2 dt) noise`` (reference implementation)."""
    x = as_configuration(x, p)
    noise = np.asarray(noise, dtype=float).reshape(x.shape)
    b = drift_psi(x, p) if spec.drift_kind == "psi" else drift_phi(x, p)
    cap = spec.cap(p)
    if cap < math.inf:
        nb = np.linalg.norm(b, axis=-1, keepdims=True)
        b = np.where(nb > cap, b * (cap / np.where(nb > 0, nb, 1.0)), b)
    out = x + b * spec.dt + math.sqrt(2.0 * spec.dt) * noise
    if not np.all(np.isfinite(out)):
        raise NumericalDivergenceError(trajectory=-1, step=0)
    return out


def _run(p, spec, M, stop_radius, record_every, keep_states, keymap, threads, traj_offset):
    if M < 1:
        raise ValueError("M must be >= 1")
    set_threads(threads)
    x0 = initial_states(p, spec, M, traj_offset)
    n_steps = spec.n_steps
    if record_every:
        stride = int(record_every)
        nrec = n_steps // stride + 1
        times = np.arange(nrec) * stride * spec.dt
    else:
        stride, nrec, times = 1, 0, None
    if keymap is None:
        keymap = np.arange(p.N, dtype=np.int64)
    keymap = np.asarray(keymap, dtype=np.int64)
    if sorted(keymap.tolist()) != list(range(p.N)):
        raise ValueError("keymap must be a permutation of particle indices")
    out_x = np.empty_like(x0)
    out_stop = np.empty(M, dtype=np.int64)
    out_status = np.empty((M, 2), dtype=np.int64)
    out_rpath = np.zeros((M, nrec))
    out_minpd = np.zeros((M, nrec))
    out_states = np.zeros((M, nrec if keep_states else 0, p.N, p.d))
    r2_stop = stop_radius**2 if math.isfinite(stop_radius) else math.inf
    _simulate_kernel(x0, p.nu, p.epsilon, spec.dt, n_steps, spec.drift_kind == "phi",
                     spec.cap(p), np.uint64(spec.seed), np.uint64(traj_offset), r2_stop,
                     stride, keymap, out_x, out_stop, out_status, out_rpath, out_minpd,
                     out_states)
    bad = np.nonzero(out_status[:, 0] != _OK)[0]
    if bad.size:
        m = int(bad[0])
        reason = "non-finite state" if out_status[m, 0] == _NONFINITE else "singular configuration"
        raise NumericalDivergenceError(trajectory=traj_offset + m,
                                       step=int(out_status[m, 1]), reason=reason)
    return Ensemble(params=p, spec=spec, M=M, initial=x0, terminal=out_x,
                    stopped_step=out_stop, stop_radius=stop_radius,
                    record_times=times,
                    r_path=out_rpath if nrec else None,
                    min_pair_dist=out_minpd if nrec else None,
                    states=out_states if (nrec and keep_states) else None,
                    meta={"traj_offset": traj_offset})


def simulate_ensemble(p, spec, M, record_every=None, keep_states=False, keymap=None,
                      threads=None, traj_offset=0):
    """M independent trajectories of the particle system up to ``spec.t_end``.

    Parameters
    ----------
    record_every : int, optional
        Record the radial statistic and the minimal pair distance every this
        many steps (plus the initial sample).
    keymap : array of int, optional
        Noise stream key of each particle slot (identity by default).  Used to
        check exchangeability in its keyed form.
    threads : int, optional
        Numba worker count; falls back to ``KSLAB_THREADS``.
    """
    return _run(p, spec, M, math.inf, record_every, keep_states, keymap, threads, traj_offset)


def simulate_stopped(p, spec, R, M, record_every=None, keep_states=False, threads=None,
                     traj_offset=0):
    """Like :func:`simulate_ensemble`, freezing each trajectory when some pair distance reaches R.

    Stopping is checked on the discrete skeleton after every step.
    """
    if not R > 0:
        raise ValueError("R must be positive")
    x0 = initial_states(p, spec, M, traj_offset)
    if np.any(max_pair_distance(x0) >= R):
        raise ValueError("initial configuration is not inside D_R")
    return _run(p, spec, M, float(R), record_every, keep_states, None, threads, traj_offset)


def blowup_probe(p, spec, M, floor=0.01, threads=None):
    """Fraction of trajectories with ``R_T < floor * R_0`` at the horizon."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    ens = simulate_ensemble(p, spec, M, threads=threads)
    R0 = radial_statistic(ens.initial)
    RT = radial_statistic(ens.terminal)
    return float(np.mean(RT < floor * R0))


# ---------------------------------------------------------------- export

_MAGIC = b"KSLABENS"


def ensemble_to_csv(ens, header=None):
    """CSV with columns ``trajectory, coordinate, value`` (terminal states)."""
    buf = io.StringIO()
    if header is not None:
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    buf.write("trajectory,coordinate,value\n")
    flat = ens.terminal.reshape(ens.M, -1)
    off = ens.meta.get("traj_offset", 0)
    for m in range(ens.M):
        for c in range(flat.shape[1]):
            buf.write(f"{off + m},{c},{float(flat[m, c])!r}\n")
    return buf.getvalue()


def ensemble_header(ens):
    return {"version": __version__, "params": asdict(ens.params), "spec": ens.spec.to_dict(),
            "M": ens.M, "stop_radius": None if math.isinf(ens.stop_radius) else ens.stop_radius}


def write_binary(ens, fh):
    """Compact dump: magic, u32 header length, JSON header, then little-endian data.

    Data blocks: initial and terminal states (float64, M*N*d each) and the stop
    step per trajectory (int64, -1 when not stopped).
    """
    head = json.dumps(ensemble_header(ens), sort_keys=True).encode()
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", len(head)))
    fh.write(head)
    fh.write(np.ascontiguousarray(ens.initial, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(ens.terminal, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(ens.stopped_step, dtype="<i8").tobytes())


def read_binary(fh):
    if fh.read(8) != _MAGIC:
        raise ValueError("not a kslab ensemble dump")
    (n,) = struct.unpack("<I", fh.read(4))
    head = json.loads(fh.read(n).decode())
    p = SystemParams(**head["params"])
    spec = SimSpec.from_dict(head["spec"])
    M = head["M"]
    size = M * p.N * p.d
    initial = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(M, p.N, p.d).copy()
    terminal = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(M, p.N, p.d).copy()
    stop = np.frombuffer(fh.read(8 * M), dtype="<i8").copy()
    R = head["stop_radius"]
    return Ensemble(params=p, spec=spec, M=M, initial=initial, terminal=terminal,
                    stopped_step=stop, stop_radius=math.inf if R is None else R)
