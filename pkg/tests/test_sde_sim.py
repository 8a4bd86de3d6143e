import io
import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from kslab.core_model import SystemParams, radial_statistic
from kslab.rng import keyed_normals
from kslab.sde_sim import (GaussianCloud, NumericalDivergenceError, SimSpec, blowup_probe,
                           default_dt, ensemble_to_csv, initial_states, read_binary,
                           simulate_ensemble, simulate_stopped, step, write_binary)
from kslab.thresholds import bessel_dimension

X2 = np.array([[1.0, 0.0], [0.0, 0.0]])


def spec(**kw):
    base = dict(dt=0.01, t_end=0.1, initial=X2, seed=11)
    base.update(kw)
    return SimSpec(**base)


def test_simspec_validation():
    with pytest.raises(ValueError):
        spec(dt=1.0, t_end=0.5)
    with pytest.raises(ValueError):
        spec(drift_kind="chi")
    with pytest.raises(ValueError):
        spec(taming_cap=math.inf)
    with pytest.raises(ValueError):
        spec(taming_cap=-1.0)
    with pytest.raises(ValueError):
        spec(initial=None)


def test_simspec_roundtrip():
    s = spec(initial=GaussianCloud(((0.0, 0.0), (1.0, 0.0)), 0.5), taming_cap=3.0)
    assert SimSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_default_dt():
    assert default_dt(SystemParams(2, 2, 1.0, 1e-4)) == 1e-4
    assert default_dt(SystemParams(2, 2, 1.0, 0.0)) == 1e-3


def test_step_examples():
    p0 = SystemParams(2, 2, 0.0)
    assert np.array_equal(step(X2, p0, spec(), np.zeros(4)), X2)
    out = step(X2, SystemParams(2, 2, 2.0), spec(dt=0.1, t_end=1.0), np.zeros(4))
    assert np.allclose(out, [[0.9, 0.0], [0.1, 0.0]], atol=1e-15)


def test_step_taming_caps_block_norm():
    p = SystemParams(2, 2, 2.0)
    out = step(X2, p, spec(dt=0.1, t_end=1.0, taming_cap=0.5), np.zeros(4))
    assert np.allclose(out, [[0.95, 0.0], [0.05, 0.0]])


def test_kernel_matches_reference_step():
    p = SystemParams(2, 3, 1.2, 1e-3)
    s = SimSpec(dt=1e-3, t_end=0.05, initial=np.array([[0, 0], [1, 0], [0, 1.0]]), seed=5)
    ens = simulate_ensemble(p, s, 3)
    for m in range(3):
        x = ens.initial[m]
        for n in range(s.n_steps):
            x = step(x, p, s, keyed_normals(s.seed, m, n, p.dim))
        assert np.array_equal(x, ens.terminal[m])


def test_brownian_additivity():
    p = SystemParams(2, 2, 0.0)
    s = spec(dt=0.05, t_end=1.0)
    ens = simulate_ensemble(p, s, 1)
    inc = sum(keyed_normals(s.seed, 0, n, 4) for n in range(s.n_steps))
    assert np.allclose(ens.terminal[0], X2 + math.sqrt(2 * s.dt) * inc.reshape(2, 2), atol=1e-13)


def test_brownian_mean_and_variance():
    p = SystemParams(2, 2, 0.0)
    ens = simulate_ensemble(p, spec(dt=0.25, t_end=1.0), 100_000)
    inc = (ens.terminal - ens.initial).reshape(ens.M, -1)
    se = math.sqrt(2.0 / ens.M)
    assert np.all(np.abs(inc.mean(axis=0)) < 4 * se)
    # variance 2t per coordinate
    assert np.all(np.abs(inc.var(axis=0) - 2.0) < 4 * 2.0 * math.sqrt(2.0 / ens.M))


def test_determinism_and_chunk_consistency():
    p = SystemParams(2, 2, 1.0, 1e-3)
    s = spec(seed=99)
    a = simulate_ensemble(p, s, 50)
    b = simulate_ensemble(p, s, 50)
    assert np.array_equal(a.terminal, b.terminal)
    tail = simulate_ensemble(p, s, 20, traj_offset=30)
    assert np.array_equal(a.terminal[30:], tail.terminal)


_DET_SCRIPT = """
import sys, numpy as np
from kslab.core_model import SystemParams
from kslab.sde_sim import SimSpec, simulate_ensemble
p = SystemParams(2, 3, 1.0, 1e-3)
s = SimSpec(dt=1e-3, t_end=0.05, seed=3, initial=np.array([[0, 0], [1, 0], [0, 1.0]]))
sys.stdout.write(simulate_ensemble(p, s, 64).terminal.tobytes().hex())
"""


def test_thread_count_independence():
    outs = []
    for n in ("1", "3"):
        env = dict(os.environ, NUMBA_NUM_THREADS="4", KSLAB_THREADS=n)
        res = subprocess.run([sys.executable, "-c", _DET_SCRIPT], env=env,
                             capture_output=True, text=True, check=True)
        outs.append(res.stdout)
    assert outs[0] == outs[1] and len(outs[0]) > 0


def test_keyed_exchangeability():
    p = SystemParams(2, 3, 1.5, 1e-3)
    x = np.array([[0.0, 0.0], [1.0, 0.2], [-0.3, 0.8]])
    perm = np.array([2, 0, 1])
    a = simulate_ensemble(p, SimSpec(dt=1e-3, t_end=0.1, initial=x, seed=8), 20)
    b = simulate_ensemble(p, SimSpec(dt=1e-3, t_end=0.1, initial=x[perm], seed=8), 20,
                          keymap=perm)
    assert np.allclose(b.terminal, a.terminal[:, perm], rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind", ["psi", "phi"])
def test_center_of_mass_martingale(kind):
    p = SystemParams(2, 3, 1.0, 1e-3)
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    ens = simulate_ensemble(p, SimSpec(dt=1e-3, t_end=0.2, initial=x, drift_kind=kind,
                                       seed=4), 4000)
    com = ens.terminal.mean(axis=1)
    se = com.std(axis=0, ddof=1) / math.sqrt(ens.M)
    assert np.all(np.abs(com.mean(axis=0) - x.mean(axis=0)) < 4 * se)


def test_radial_mean_identity():
    p = SystemParams(2, 2, 1.0, 1e-6)
    s = SimSpec(dt=1e-3, t_end=0.5, initial=X2, seed=21)
    ens = simulate_ensemble(p, s, 20_000)
    R = radial_statistic(ens.terminal)
    expected = 0.25 + bessel_dimension(2, 1.0) * 0.5
    se = R.std(ddof=1) / math.sqrt(R.size)
    assert abs(R.mean() - expected) < 4 * se + 0.02 * expected


def test_records():
    p = SystemParams(2, 2, 1.0, 1e-3)
    ens = simulate_ensemble(p, spec(dt=0.01, t_end=0.1), 5, record_every=2, keep_states=True)
    assert np.allclose(ens.record_times, np.arange(6) * 0.02)
    assert ens.r_path.shape == (5, 6) and ens.states.shape == (5, 6, 2, 2)
    assert np.allclose(ens.r_path[:, 0], 0.25)
    assert np.allclose(ens.r_path[:, -1], radial_statistic(ens.terminal))
    assert np.array_equal(ens.states[:, -1], ens.terminal)
    rec = ens.record(0)
    assert rec.stopped_at is None and not rec.absorbed


def test_stopped_inactive_barrier():
    p = SystemParams(2, 2, 1.0, 1e-3)
    s = spec()
    a = simulate_ensemble(p, s, 30)
    b = simulate_stopped(p, s, 1e6, 30)
    assert not b.stopped.any()
    assert np.array_equal(a.terminal, b.terminal)


def test_stopped_domain_error():
    with pytest.raises(ValueError):
        simulate_stopped(SystemParams(2, 2, 1.0), spec(), 0.5, 10)


def test_stopped_properties():
    p = SystemParams(2, 2, 0.0)
    R = 2.0
    s = SimSpec(dt=1e-2, t_end=2.0, initial=X2, seed=6)
    ens = simulate_stopped(p, s, R, 2000, record_every=10)
    d = np.linalg.norm(ens.terminal[:, 0] - ens.terminal[:, 1], axis=-1)
    assert np.all(d[ens.surviving] < R)
    assert np.all(d[ens.stopped] >= R)
    # frozen after the stop
    for m in np.nonzero(ens.stopped)[0][:20]:
        k = int(np.ceil(ens.stopped_step[m] / 10))
        assert np.all(ens.r_path[m, k:] == ens.r_path[m, -1])
    fractions = [np.mean(ens.stopped_at <= t) for t in (0.25, 0.5, 1.0, 2.0)]
    assert all(a <= b for a, b in zip(fractions, fractions[1:]))
    assert fractions[-1] > fractions[0]


def test_blowup_probe_brownian():
    assert blowup_probe(SystemParams(2, 2, 0.0), spec(dt=0.05, t_end=1.0), 2000) < 0.01
    with pytest.raises(ValueError):
        blowup_probe(SystemParams(2, 2, 0.0), spec(), 10, floor=0.0)


def test_gaussian_cloud_initial():
    p = SystemParams(2, 2, 0.0)
    s = SimSpec(dt=0.1, t_end=0.1, initial=GaussianCloud(((0, 0), (3, 0)), 0.5), seed=2)
    x0 = initial_states(p, s, 20_000)
    assert np.allclose(x0.mean(axis=0), [[0, 0], [3, 0]], atol=0.03)
    assert np.allclose(x0.std(axis=0), 0.5, atol=0.01)
    assert np.array_equal(initial_states(p, s, 5, traj_offset=3), x0[3:8])


def test_divergence_error_carries_provenance():
    p = SystemParams(2, 2, 1.0, 1e-3)
    x = np.array([[np.nan, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericalDivergenceError) as info:
        simulate_ensemble(p, SimSpec(dt=1e-3, t_end=0.01, initial=x, seed=1), 2, traj_offset=7)
    assert info.value.trajectory == 7 and info.value.step == 0
    with pytest.raises(NumericalDivergenceError):
        step(x, p, spec(), np.zeros(4))


def test_taming_stress():
    p = SystemParams(2, 2, 6.0, 1e-12)
    dt = 1e-4
    s = SimSpec(dt=dt, t_end=100.0, initial=X2, seed=13, taming_cap=0.1 / dt)
    ens = simulate_ensemble(p, s, 1)
    assert s.n_steps == 10**6
    assert np.all(np.isfinite(ens.terminal))


def test_binary_and_csv_roundtrip():
    p = SystemParams(2, 2, 1.0, 1e-3)
    ens = simulate_stopped(p, spec(t_end=0.5), 3.0, 7)
    buf = io.BytesIO()
    write_binary(ens, buf)
    buf.seek(0)
    back = read_binary(buf)
    assert back.params == p and back.spec.dt == ens.spec.dt
    assert np.array_equal(back.terminal, ens.terminal)
    assert np.array_equal(back.stopped_step, ens.stopped_step)
    with pytest.raises(ValueError):
        read_binary(io.BytesIO(b"garbage!"))
    text = ensemble_to_csv(ens, header={"k": 1})
    lines = text.splitlines()
    assert lines[0].startswith("# ") and lines[1] == "trajectory,coordinate,value"
    vals = np.array([float(l.split(",")[2]) for l in lines[2:]])
    assert np.array_equal(vals, ens.terminal.ravel())
