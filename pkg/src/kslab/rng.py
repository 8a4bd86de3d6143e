"""Counter-based Gaussian noise (Philox4x32-10 + Box-Muller).

Every normal variate is a pure function of ``(seed, trajectory, step,
coordinate)``, so ensembles are bit-reproducible under any parallel schedule.
"""
import math

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0

#: Step index reserved for drawing initial conditions.
INITIAL_STEP = np.uint64(0xFFFFFFFFFFFFFFFF)


@numba.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 bijection; all arguments are uint64 holding 32-bit words."""
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> _S32) ^ c1 ^ k0) & _MASK
        n1 = p1 & _MASK
        n2 = ((p0 >> _S32) ^ c3 ^ k1) & _MASK
        n3 = p0 & _MASK
        c0, c1, c2, c3 = n0, n1, n2, n3
    return c0, c1, c2, c3


@numba.njit(cache=True, inline="always")
def normal_pair(seed, traj, step, block):
    """Two independent N(0, 1) variates for coordinate block ``block`` (coordinates 2b, 2b+1)."""
    s = np.uint64(seed)
    st = np.uint64(step)
    a, b, c, d = philox4x32(np.uint64(block) & _MASK, st & _MASK, st >> _S32,
                            np.uint64(traj) & _MASK, s & _MASK, s >> _S32)
    u1 = ((a >> np.uint64(5)) * np.uint64(67108864) + (b >> np.uint64(6))) * _INV_2_53
    u2 = ((c >> np.uint64(5)) * np.uint64(67108864) + (d >> np.uint64(6))) * _INV_2_53
    rad = math.sqrt(-2.0 * math.log(1.0 - u1))
    ang = _TWO_PI * u2
    return rad * math.cos(ang), rad * math.sin(ang)


@numba.njit(cache=True)
def fill_normals(seed, traj, step, out):
    n = out.shape[0]
    for q in range((n + 1) // 2):
        z0, z1 = normal_pair(seed, traj, step, q)
        out[2 * q] = z0
        if 2 * q + 1 < n:
            out[2 * q + 1] = z1


def keyed_normals(seed, traj, step, n):
    """Return the ``n`` standard normals of stream ``(seed, traj)`` at ``step``."""
    out = np.empty(n)
    fill_normals(np.uint64(seed), np.uint64(traj), np.uint64(step), out)
    return out


def philox_words(counter, key):
    """Python-level access to the raw bijection (used for known-answer tests)."""
    c = [np.uint64(w) for w in counter]
    k = [np.uint64(w) for w in key]
    return tuple(int(w) for w in philox4x32(c[0], c[1], c[2], c[3], k[0], k[1]))
