import csv
import io
import json
import os
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kslab import __version__
from kslab.cli import DEFAULTS, ConfigError, RunConfig, main, parse_value


def run(tmp_path, *argv):
    out = tmp_path / "out"
    out.mkdir(parents=True, exist_ok=True)
    code = main(list(argv) + ["--out", str(out)])
    return code, out


def read_all(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("1e-3") == 1e-3
    assert parse_value("1000,1000000000") == [1000, 1000000000]
    assert parse_value("0:5:0.5") == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0]
    assert parse_value('{"a": [1, 2]}') == {"a": [1, 2]}
    assert parse_value("phi") == "phi"
    assert parse_value("") == []
    with pytest.raises(ConfigError):
        parse_value("3:1:1")


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10**6, 10**6)
    | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=5),
    lambda ch: st.lists(ch, max_size=3) | st.dictionaries(st.text(max_size=4), ch, max_size=3),
    max_leaves=8)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(DEFAULTS)), st.data())
def test_config_round_trip(cmd, data):
    keys = data.draw(st.lists(st.sampled_from(sorted(DEFAULTS[cmd])), unique=True, max_size=4))
    params = {k: data.draw(json_values) for k in keys}
    rc = RunConfig.from_dict({"schema_version": 1, "command": cmd, "params": params})
    back = RunConfig.from_dict(json.loads(rc.to_json()))
    assert back == rc


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 1, "command": "thresholds", "params": {"q": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 1, "command": "thresholds", "extra": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 2, "command": "thresholds"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schema_version": 1, "command": "plot"})


def test_thresholds_command(tmp_path):
    code, out = run(tmp_path, "thresholds", "--d", "2", "--N", "1000,1000000000")
    assert code == 0
    res = json.loads((out / "thresholds.json").read_text())
    assert 0.35 <= res["ratio_last_first"] <= 0.65
    assert res["version"] == __version__ and res["config"]["command"] == "thresholds"
    text = (out / "thresholds.csv").read_text()
    header = json.loads(text.splitlines()[0][2:])
    assert header["config"]["params"]["N"] == [1000, 1000000000]
    rows = list(csv.reader(io.StringIO(text.split("\n", 1)[1])))
    assert rows[0] == ["N", "d", "alpha", "nu_max"] and len(rows) > 2000


def test_thresholds_d3(tmp_path):
    code, out = run(tmp_path, "thresholds", "--d", "3", "--N", "2")
    assert code == 0
    c = json.loads((out / "thresholds.json").read_text())["curves"][0]
    assert c["argmax_alpha"] == 2.0 and abs(c["max_value"] - 1.0) < 1e-12


def test_usage_errors_exit_2(tmp_path, capsys):
    code, out = run(tmp_path, "thresholds", "--N", "")
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and err["command"] == "thresholds"
    assert list(out.iterdir()) == []
    assert main(["thresholds", "--out", str(tmp_path / "missing")]) == 2
    assert run(tmp_path, "simulate", "--nu", "-1")[0] == 2
    assert run(tmp_path, "simulate", "--format", "xml", "--M", "2")[0] == 2
    assert main(["nonsense", "--out", str(tmp_path)]) == 2
    assert run(tmp_path, "hardy-check", "--check", "other", "--seeds", "1")[0] == 2


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"schema_version": 1, "command": "thresholds",
                               "params": {"d": 4, "N": [2]}}))
    before = cfg.read_bytes()
    code, out = run(tmp_path, "thresholds", "--config", str(cfg))
    assert code == 0 and cfg.read_bytes() == before
    assert abs(json.loads((out / "thresholds.json").read_text())["curves"][0]["max_value"]
               - 2.0) < 1e-12
    code, out = run(tmp_path, "thresholds", "--config", str(cfg), "--d", "3")
    assert json.loads((out / "thresholds.json").read_text())["config"]["params"]["d"] == 3
    assert run(tmp_path, "simulate", "--config", str(cfg))[0] == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "command": "thresholds",
                               "params": {"dd": 4}}))
    assert run(tmp_path, "thresholds", "--config", str(bad))[0] == 2


@pytest.mark.parametrize("argv", [
    ["simulate", "--M", "20", "--t-end", "0.1", "--dt", "0.01", "--seed", "5"],
    ["simulate", "--M", "20", "--t-end", "0.1", "--dt", "0.01", "--format", "binary"],
    ["simulate", "--M", "20", "--t-end", "0.1", "--dt", "0.01", "--stop-radius", "1.5"],
    ["density", "--M", "2000", "--t-end", "0.2", "--dt", "0.01", "--nu", "0.2"],
    ["bessel-validate", "--M", "2000", "--t-end", "0.1", "--dt", "0.01", "--nu", "0",
     "--epsilon", "0", "--ks-max", "0.1"],
    ["hardy-check", "--seeds", "3"],
    ["hardy-check", "--check", "form_bound", "--seeds", "2"],
    ["hardy-check", "--check", "sobolev", "--d", "3", "--nu", "0.5", "--epsilon", "0.01",
     "--seeds", "2"],
    ["sweep", "--nu", "0,5", "--M", "20", "--t-end", "0.05", "--dt", "0.01"],
])
def test_commands_are_deterministic(tmp_path, argv):
    code1, out1 = run(tmp_path / "a", *argv)
    code2, out2 = run(tmp_path / "b", *argv)
    assert code1 == code2 == 0
    a, b = read_all(out1), read_all(out2)
    assert a == b and a
    assert not any(name.endswith(".partial") for name in a)
    for name, data in a.items():
        if name.endswith(".json"):
            doc = json.loads(data)
            assert doc["version"] == __version__ and doc["config"]["command"] == argv[0]
        elif name.endswith(".csv"):
            assert json.loads(data.decode().splitlines()[0][2:])["config"]["command"] == argv[0]


def test_failed_check_exits_1(tmp_path, capsys):
    code, out = run(tmp_path, "bessel-validate", "--M", "2000", "--t-end", "0.1", "--dt", "0.01",
                    "--nu", "0", "--epsilon", "0", "--ks-max", "0")
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "CheckFailed"
    assert json.loads((out / "bessel.json").read_text())["passed"] is False


def test_sweep_crosses_near_blowup_threshold(tmp_path):
    code, out = run(tmp_path, "sweep", "--nu", "0:6:2", "--M", "200", "--epsilon", "1e-4",
                    "--dt", "1e-4", "--t-end", "0.5")
    assert code == 0
    rows = json.loads((out / "sweep.json").read_text())["rows"]
    fracs = {nu: f for nu, _, f in rows}
    assert fracs[0.0] == 0.0 and fracs[2.0] < 0.05
    assert fracs[6.0] > 0.5 and fracs[6.0] > fracs[2.0]


def test_console_script(tmp_path):
    out = tmp_path / "o"
    out.mkdir()
    res = subprocess.run([sys.executable, "-m", "kslab.cli", "thresholds", "--d", "3", "--N",
                          "2", "--out", str(out)], capture_output=True, text=True,
                         env=dict(os.environ))
    assert res.returncode == 0, res.stderr
    assert (out / "thresholds.csv").exists()
