"""Command-line entry point.

Every run is described by one JSON document::

    {"schema_version": 1, "command": "simulate", "params": {...}}

given with ``--config`` and/or built from per-command flags (flags override
the file).  Outputs go to ``--out`` (which must exist); every CSV starts with a
``#`` line holding the resolved config and the package version, and every
JSON output embeds both.  Exit codes: 0 success, 1 a checked inequality or
acceptance threshold failed, 2 usage/config/module error (JSON on stderr).
"""
import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__

SCHEMA_VERSION = 1

_SIM = {
    "d": 2, "N": 2, "nu": 1.0, "epsilon": 1e-3, "dt": None, "t_end": 1.0,
    "drift_kind": "psi", "taming_cap": None, "seed": 0, "initial": None, "M": 1000,
    "stop_radius": None,
}

DEFAULTS = {
    "thresholds": {"d": 2, "N": [1000, 1000000, 1000000000], "alpha_step": 1e-3},
    "simulate": dict(_SIM, format="csv"),
    "density": dict(_SIM, M=10000, order=2, bound="thm1",
                    query={"kind": "transect", "pair": [0, 1],
                           "offsets": [1.0, 0.5, 0.25, 0.1, 0.05, 0.0]}),
    "bessel-validate": dict(_SIM, epsilon=1e-4, dt=1e-4, t_end=0.5, M=10000,
                            mean_gap_max=4.0, ks_max=0.02),
    "hardy-check": {"check": "hardy2d", "alpha": 1.0, "d": 2, "N": 2, "nu": 0.1,
                    "epsilon": 0.0, "n": None, "box": None, "kmax": 2, "support": None,
                    "seeds": 20, "seed": 0},
    "sweep": {"probe": "blowup", "d": 2, "N": 2, "nu": [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
              "epsilon": 1e-4, "dt": 1e-4, "t_end": 2.0, "M": 200, "seed": 0,
              "floor": 0.01, "initial": None},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, dct):
        if not isinstance(dct, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(dct) - {"schema_version", "command", "params"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if dct.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        cmd = dct.get("command")
        if cmd not in DEFAULTS:
            raise ConfigError(f"unknown command {cmd!r}")
        params = dct.get("params", {})
        unknown = set(params) - set(DEFAULTS[cmd])
        if unknown:
            raise ConfigError(f"unknown keys for {cmd}: {sorted(unknown)}")
        return cls(command=cmd, params=copy.deepcopy(params), schema_version=SCHEMA_VERSION)

    def resolved(self):
        out = copy.deepcopy(DEFAULTS[self.command])
        out.update(copy.deepcopy(self.params))
        return RunConfig(self.command, out, self.schema_version)

    def to_dict(self):
        return {"schema_version": self.schema_version, "command": self.command,
                "params": copy.deepcopy(self.params)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- value parsing

def parse_value(text):
    """Flag value: JSON, a comma list, or an inclusive ``start:stop:step`` range."""
    text = text.strip()
    if text.count(":") == 2 and not text.startswith(("{", "[", '"')):
        a, b, c = (float(v) for v in text.split(":"))
        if c <= 0 or b < a:
            raise ConfigError(f"bad range {text!r}")
        k = int(math.floor((b - a) / c + 1e-9))
        return [round(a + i * c, 12) for i in range(k + 1)]
    if "," in text and not text.startswith(("{", "[")):
        return [parse_value(v) for v in text.split(",") if v.strip()]
    if text == "":
        return []
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        try:
            return float(text)
        except ValueError:
            return text


def _as_int(v, name):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return int(v)


def _as_list(v):
    return v if isinstance(v, list) else [v]


# ---------------------------------------------------------------- builders

def _params(c):
    from .core_model import SystemParams
    return SystemParams(d=_as_int(c["d"], "d"), N=_as_int(c["N"], "N"), nu=float(c["nu"]),
                        epsilon=float(c["epsilon"]))


def _default_initial(p):
    x = np.zeros((p.N, p.d))
    x[:, 0] = np.arange(p.N, dtype=float)
    return x


def _spec(c, p, drift=None):
    from .sde_sim import GaussianCloud, SimSpec, default_dt
    init = c.get("initial")
    if init is None:
        init = _default_initial(p)
    elif isinstance(init, dict) and "gaussian_cloud" in init:
        g = init["gaussian_cloud"]
        init = GaussianCloud(tuple(map(tuple, g["center"])), float(g["spread"]))
    elif isinstance(init, dict) and "point" in init:
        init = np.asarray(init["point"], dtype=float)
    else:
        init = np.asarray(init, dtype=float)
    dt = c.get("dt")
    dt = default_dt(p) if dt is None else float(dt)
    return SimSpec(dt=dt, t_end=float(c["t_end"]), drift_kind=drift or c.get("drift_kind", "psi"),
                   taming_cap=c.get("taming_cap"), seed=_as_int(c["seed"], "seed"), initial=init)


def _simulate(c, p, spec):
    from .sde_sim import simulate_ensemble, simulate_stopped
    M = _as_int(c["M"], "M")
    if c.get("stop_radius") is not None:
        return simulate_stopped(p, spec, float(c["stop_radius"]), M)
    return simulate_ensemble(p, spec, M)


def _csv_text(header, columns, rows):
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_thresholds(c, header):
    from .thresholds import nu_max
    Ns = [_as_int(v, "N") for v in _as_list(c["N"])]
    if not Ns:
        raise ConfigError("N list is empty")
    d = _as_int(c["d"], "d")
    rows, summary = [], []
    for N in Ns:
        curve = nu_max(N, d, step=float(c["alpha_step"]))
        rows.extend((N, d, float(a), float(v)) for a, v in zip(curve.alphas, curve.values))
        summary.append({"N": N, "d": d, "argmax_alpha": curve.argmax_alpha,
                        "max_value": curve.max_value,
                        "grid_argmax_alpha": curve.grid_argmax_alpha,
                        "grid_max_value": curve.grid_max_value})
    out = {"thresholds.csv": _csv_text(header, ["N", "d", "alpha", "nu_max"], rows)}
    res = {"curves": summary}
    if len(summary) > 1:
        res["ratio_last_first"] = summary[-1]["max_value"] / summary[0]["max_value"]
    out["thresholds.json"] = res
    return out, True


def cmd_simulate(c, header):
    from .core_model import radial_statistic
    from .sde_sim import ensemble_to_csv, write_binary
    p = _params(c)
    spec = _spec(c, p)
    ens = _simulate(c, p, spec)
    out = {}
    if c["format"] == "csv":
        out["ensemble.csv"] = ensemble_to_csv(ens, header)
    elif c["format"] == "binary":
        buf = io.BytesIO()
        write_binary(ens, buf)
        out["ensemble.bin"] = buf.getvalue()
    else:
        raise ConfigError("format must be 'csv' or 'binary'")
    R = radial_statistic(ens.terminal)
    out["summary.json"] = {"M": ens.M, "stopped_fraction": float(np.mean(ens.stopped)),
                           "mean_R": float(np.mean(R)),
                           "center_of_mass": np.mean(ens.terminal, axis=(0, 1)).tolist()}
    return out, True


def _start_point(spec, p):
    from .sde_sim import GaussianCloud
    init = spec.initial
    if isinstance(init, GaussianCloud):
        init = init.center
    return np.asarray(init, dtype=float).reshape(p.N, p.d)


def _query(c, p, spec):
    from .density_est import lattice, transect
    q = c["query"]
    x = _start_point(spec, p)
    kind = q.get("kind")
    if kind == "transect":
        i, j = q.get("pair", [0, 1])
        return transect(x, i, j, q["offsets"])
    if kind == "lattice":
        return lattice(x, float(q["half_width"]), _as_int(q["n"], "n"))
    if kind == "points":
        return np.asarray(q["points"], dtype=float)
    raise ConfigError("query kind must be transect, lattice or points")


def cmd_density(c, header):
    from .density_est import estimate_density, estimate_to_csv, fit_bound
    p = _params(c)
    spec = _spec(c, p)
    ens = _simulate(c, p, spec)
    est = estimate_density(ens, spec.t_end, _query(c, p, spec), order=_as_int(c["order"], "order"))
    fit = None
    res = {"M": ens.M, "bandwidth": est.bandwidth.tolist()}
    if c["bound"] is not None:
        fit = fit_bound(est, spec.t_end, p, c["bound"], x=_start_point(spec, p))
        res["fit"] = json.loads(fit.to_json())
    return {"density.csv": estimate_to_csv(est, p, fit, header), "density.json": res}, True


def cmd_bessel_validate(c, header):
    from .bessel_oracle import validate_radial
    p = _params(c)
    spec = _spec(c, p, drift="psi")
    ens = _simulate(c, p, spec)
    v = validate_radial(ens, p)
    ok = abs(v.mean_gap) <= float(c["mean_gap_max"])
    if v.ks_distance is not None:
        ok = ok and v.ks_distance <= float(c["ks_max"])
    return {"bessel.json": dict(v._asdict(), passed=ok)}, ok


_HARDY_GRIDS = {2: (128, 16.0, 2.0), 3: (64, 12.0, 3.0), 4: (24, 12.0, 3.0),
                5: (16, 12.0, 3.0), 6: (12, 12.0, 3.0)}


def cmd_hardy_check(c, header):
    from .core_model import SystemParams
    from . import hardy_forms as H
    check = c["check"]
    d, N = _as_int(c["d"], "d"), _as_int(c["N"], "N")
    dim = 2 if check == "hardy2d" else d * N
    # grid defaults per dimension: (n, box, support)
    n0, box0, sup0 = _HARDY_GRIDS.get(dim, (12, 12.0, 3.0))
    n = n0 if c["n"] is None else _as_int(c["n"], "n")
    box = box0 if c["box"] is None else float(c["box"])
    support = sup0 if c["support"] is None else float(c["support"])
    seeds = range(_as_int(c["seed"], "seed"), _as_int(c["seed"], "seed") + _as_int(c["seeds"], "seeds"))
    kw = {"kmax": _as_int(c["kmax"], "kmax"), "support": support}
    rows = []
    if check == "sobolev":
        p = SystemParams(d, N, float(c["nu"]), float(c["epsilon"]))
        C = 0.0
        for s in seeds:
            r = H.weighted_sobolev_ratio(H.random_bandlimited(dim, n, box, s, **kw), p, C)
            C = r.fitted_C
            rows.append((s, r.ratio, r.norm_sq, r.energy, r.resolved))
        res = {"fitted_C": C, "min_ratio": min(r[1] for r in rows)}
        cols = ["seed", "ratio", "norm_sq", "energy", "resolved"]
        ok = all(math.isfinite(r[1]) for r in rows)
    else:
        for s in seeds:
            f = H.random_bandlimited(dim, n, box, s, **kw)
            if check == "hardy2d":
                r = H.hardy_ratio_2d(f, float(c["alpha"]))
            elif check == "many_particle":
                r = H.many_particle_hardy_ratio(f, d, N)
            elif check == "form_bound":
                r = H.form_bound_ratio(f, float(c["alpha"]),
                                       SystemParams(d, N, float(c["nu"]), float(c["epsilon"])))
            else:
                raise ConfigError("check must be hardy2d, many_particle, form_bound or sobolev")
            rows.append((s, r.ratio, r.lhs, r.rhs, r.passed))
        cols = ["seed", "ratio", "lhs", "rhs", "passed"]
        ok = all(r[4] for r in rows)
        res = {"max_ratio": max(r[1] for r in rows), "tolerance": H.TOLERANCE}
    res.update(passed=ok, grid={"dim": dim, "n": n, "box": box, "support": support})
    return {"hardy.csv": _csv_text(header, cols, rows), "hardy.json": res}, ok


def cmd_sweep(c, header):
    from .core_model import SystemParams
    from .sde_sim import SimSpec, blowup_probe
    from .thresholds import bessel_dimension
    if c["probe"] != "blowup":
        raise ConfigError("only the 'blowup' probe is available")
    d, N = _as_int(c["d"], "d"), _as_int(c["N"], "N")
    nus = [float(v) for v in _as_list(c["nu"])]
    if not nus:
        raise ConfigError("nu list is empty")
    rows = []
    for nu in nus:
        p = SystemParams(d, N, nu, float(c["epsilon"]))
        spec = _spec(dict(c, drift_kind="psi", taming_cap=None), p)
        frac = blowup_probe(p, spec, _as_int(c["M"], "M"), floor=float(c["floor"]))
        rows.append((nu, bessel_dimension(N, nu, d), frac))
    return ({"sweep.csv": _csv_text(header, ["nu", "bessel_dimension", "absorbed_fraction"], rows),
             "sweep.json": {"rows": [list(r) for r in rows]}}, True)


COMMANDS = {
    "thresholds": cmd_thresholds,
    "simulate": cmd_simulate,
    "density": cmd_density,
    "bessel-validate": cmd_bessel_validate,
    "hardy-check": cmd_hardy_check,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------- plumbing

def build_parser():
    ap = argparse.ArgumentParser(prog="kslab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--out", required=True, help="existing output directory")
        for key in defaults:
            sp.add_argument("--" + key.replace("_", "-"), dest="set_" + key, default=None,
                            metavar="VALUE", help=f"override '{key}' (default {defaults[key]!r})")
    return ap


def _write_outputs(outdir, files, header):
    written = []
    try:
        for name, content in files.items():
            if isinstance(content, dict):
                content = json.dumps(dict(content, config=header["config"],
                                          version=header["version"]),
                                     sort_keys=True, indent=2) + "\n"
            data = content if isinstance(content, bytes) else content.encode("utf-8")
            path = os.path.join(outdir, name)
            tmp = path + ".partial"
            with open(tmp, "wb") as fh:
                fh.write(data)
            written.append(tmp)
        for tmp in written:
            os.replace(tmp, tmp[: -len(".partial")])
    except BaseException:
        for tmp in written:
            if os.path.exists(tmp):
                os.remove(tmp)
        raise


def _fail(code, err, command=None):
    sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err),
                                 "command": command}, sort_keys=True) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    cmd = args.command
    try:
        if not os.path.isdir(args.out):
            raise ConfigError(f"output directory {args.out!r} does not exist")
        base = {"schema_version": SCHEMA_VERSION, "command": cmd, "params": {}}
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
            if base.get("command") != cmd:
                raise ConfigError(f"config is for command {base.get('command')!r}, not {cmd!r}")
        rc = RunConfig.from_dict(base)
        for key in DEFAULTS[cmd]:
            v = getattr(args, "set_" + key)
            if v is not None:
                rc.params[key] = parse_value(v)
        rc = rc.resolved()
        header = {"config": rc.to_dict(), "version": __version__}
        files, ok = COMMANDS[cmd](rc.params, header)
        _write_outputs(args.out, files, header)
    except (ConfigError, ValueError, TypeError, KeyError, OSError, ArithmeticError) as e:
        return _fail(2, e, cmd)
    if not ok:
        sys.stderr.write(json.dumps({"error": "CheckFailed", "command": cmd}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
