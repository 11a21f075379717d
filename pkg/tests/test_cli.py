import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from malliavin_lab import config as cfgmod
from malliavin_lab.cli import main, run_dir


def write_cfg(tmp_path, body, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(body) if name.endswith(".json") else body)
    return p


def run(tmp_path, cmd, cfg, *extra):
    out = tmp_path / "runs"
    code = main([cmd, "--config", str(cfg), "--out", str(out), *extra])
    dirs = sorted(out.iterdir()) if out.exists() else []
    return code, dirs


def quintic_cfg(**sim):
    s = {"steps": 200, "paths": 300, "seed": 2}
    s.update(sim)
    return {"model": {"b": "-x^5", "sigma": "x^2", "x0": 1.0}, "sim": s,
            "truncation": {"levels": [2, 4], "reference": 8},
            "analysis": {"p_list": [2], "eps_list": [0.05, 0.1], "q": [1], "R": 5.0}}


# -- exit codes --------------------------------------------------------------------


def test_check_quintic_passes(tmp_path, capsys):
    code, dirs = run(tmp_path, "check", write_cfg(tmp_path, quintic_cfg()))
    assert code == 0
    d = json.loads(capsys.readouterr().out)
    assert d["pass"] and d["xi"] == 4
    assert (dirs[0] / "check.json").exists()


@pytest.mark.parametrize("b, code", [("x^2", 2), ("0", 0), ("x^3", 2)])
def test_check_exit_codes(tmp_path, b, code):
    cfg = {"model": {"b": b, "sigma": "0" if b == "0" else "1"}}
    assert run(tmp_path, "check", write_cfg(tmp_path, cfg))[0] == code


def test_usage_errors_exit_4(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["simulate"])
    assert info.value.code == 4
    with pytest.raises(SystemExit) as info:
        main(["no-such-command", "--config", "x.toml"])
    assert info.value.code == 4


def test_usage_error_from_console_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "malliavin_lab", "density"], capture_output=True, text=True)
    assert r.returncode == 4 and "--config" in r.stderr


@pytest.mark.parametrize("body", [
    {"sim": {"steps": 10}},
    {"model": {"b": "-x^", "sigma": "1"}},
    {"model": {"b": "-x", "sigma": "1", "T": 0}},
    {"model": {"b": "-x", "sigma": "1"}, "sim": {"paths": 0}},
    {"model": {"b": "-x", "sigma": "1"}, "sim": {"scheme": "heun"}},
    {"model": {"b": "-x", "sigma": "1"}, "extra": {}},
    {"model": {"b": "-x", "sigma": "1", "drift": "0"}},
    {"model": {"b": "-x", "sigma": "1"}, "analysis": {"eps_list": [-1]}},
    {"model": {"b": "-x", "sigma": "1"}, "sim": {"seed": -1}},
])
def test_invalid_configs_exit_4(tmp_path, body):
    assert run(tmp_path, "check", write_cfg(tmp_path, body))[0] == 4


def test_missing_and_malformed_config_files(tmp_path):
    assert run(tmp_path, "check", tmp_path / "absent.toml")[0] == 4
    assert run(tmp_path, "check", write_cfg(tmp_path, "[model\nb=", name="bad.toml"))[0] == 4


def test_toml_and_json_configs_agree(tmp_path):
    toml = write_cfg(tmp_path, '[model]\nb = "-x"\nsigma = "1"\n[sim]\nseed = 3\n', name="a.toml")
    js = write_cfg(tmp_path, {"model": {"b": "-x", "sigma": "1"}, "sim": {"seed": 3}}, name="a.json")
    a, b = cfgmod.load(toml), cfgmod.load(js)
    assert a.digest() == b.digest() and a.to_dict() == b.to_dict()


def test_digest_ignores_seed_only(tmp_path):
    c = cfgmod.from_dict(quintic_cfg())
    assert cfgmod.with_overrides(c, seed=99).digest() == c.digest()
    assert cfgmod.with_overrides(c, paths=7).digest() != c.digest()
    assert run_dir(cfgmod.with_overrides(c, seed=99), Path("o")).name.endswith("-s99")


def test_growth_required_for_non_polynomial_truncation(tmp_path):
    cfg = {"model": {"b": "-x", "sigma": "exp(-x^2)"}, "truncation": {"levels": [2]}, "sim": {"paths": 10, "steps": 5}}
    assert run(tmp_path, "convergence", write_cfg(tmp_path, cfg))[0] == 4


# -- outputs -----------------------------------------------------------------------


def test_hormander_json(tmp_path, capsys):
    cfg = {"model": {"b": "1-x^5", "sigma": "x^2", "x0": 0.0}}
    assert run(tmp_path, "hormander", write_cfg(tmp_path, cfg))[0] == 0
    d = json.loads(capsys.readouterr().out)
    assert d["pass"] and d["witness"] == 2
    cfg["model"]["b"] = "-x^5"
    assert run(tmp_path, "hormander", write_cfg(tmp_path, cfg))[0] == 2


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.mark.parametrize("cmd, name, header", [
    ("simulate", "paths.csv", ["path", "t", "X", "Z", "C"]),
    ("moments", "moments.csv", ["level", "t", "p", "mean", "stderr", "explosions"]),
    ("convergence", "convergence.csv", ["level", "mse", "stderr", "exit_fraction", "explosions"]),
    ("nondeg", "nondeg.csv", ["eps", "p_hat", "ci_lo", "ci_hi", "bound", "p"]),
    ("density", "density.csv", ["x", "ibp", "ibp_se", "kde", "kde_se"]),
])
def test_csv_headers_and_manifest(tmp_path, cmd, name, header):
    code, dirs = run(tmp_path, cmd, write_cfg(tmp_path, quintic_cfg()))
    assert code in (0, 2)
    d = dirs[0]
    rows = read_csv(d / name)
    assert rows[0] == header and len(rows) > 1
    man = json.loads((d / f"manifest_{cmd}.json").read_text())
    for key in ("command", "config", "seed", "started", "elapsed_s", "explosions", "excluded_paths",
                "exit_code", "outputs", "versions"):
        assert key in man
    assert man["exit_code"] == code and man["seed"] == 2 and name in man["outputs"]
    assert d.name == f"{cfgmod.from_dict(quintic_cfg()).digest()}-s2"


def test_simulate_rows(tmp_path):
    _, dirs = run(tmp_path, "simulate", write_cfg(tmp_path, quintic_cfg(paths=10)))
    rows = read_csv(dirs[0] / "paths.csv")[1:]
    assert len(rows) == 10 * 9
    first = [r for r in rows if r[0] == "0"]
    assert float(first[0][1]) == 0.0 and float(first[0][2]) == 1.0 and float(first[0][3]) == 1.0
    assert float(first[-1][1]) == 1.0


def test_moments_summary_and_levels(tmp_path):
    code, dirs = run(tmp_path, "moments", write_cfg(tmp_path, quintic_cfg()))
    assert code == 0
    rows = read_csv(dirs[0] / "moments.csv")[1:]
    assert {r[0] for r in rows} == {"2", "4", "2:sup", "4:sup"}
    s = json.loads((dirs[0] / "moments_summary.json").read_text())
    assert s["pass"] and s["max_second_moment"] <= s["envelope"]


def test_audit_json(tmp_path, capsys):
    code, dirs = run(tmp_path, "audit-lyapunov", write_cfg(tmp_path, {"model": {"b": "-x", "sigma": "1"}}))
    assert code == 0
    d = json.loads((dirs[0] / "lyapunov.json").read_text())
    assert d["pass"] and {a["q"] for a in d["audits"]} == {1, 2}
    assert run(tmp_path, "audit-lyapunov", write_cfg(tmp_path, {"model": {"b": "x^3", "sigma": "1"}}))[0] == 2


def test_degenerate_runs_exit_3(tmp_path):
    cfg = {"model": {"b": "0", "sigma": "x", "T": 4.0}, "sim": {"steps": 4, "paths": 200, "scheme": "explicit-euler"}}
    assert run(tmp_path, "simulate", write_cfg(tmp_path, cfg))[0] == 3


# -- determinism ---------------------------------------------------------------------


def _artifacts(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if not p.name.startswith("manifest_")}


@pytest.mark.parametrize("cmd", ["simulate", "moments", "nondeg", "density", "convergence"])
def test_reruns_byte_identical_across_thread_counts(tmp_path, monkeypatch, cmd):
    cfg = write_cfg(tmp_path, quintic_cfg(paths=2500, steps=100))
    out = []
    for threads, sub in (("1", "a"), ("4", "b"), ("1", "c")):
        monkeypatch.setenv("MALLIAVIN_LAB_THREADS", threads)
        code = main([cmd, "--config", str(cfg), "--out", str(tmp_path / sub)])
        (d,) = list((tmp_path / sub).iterdir())
        out.append((code, _artifacts(d)))
    assert out[0] == out[1] == out[2]
    assert out[0][1]


def test_seed_override_changes_results(tmp_path):
    cfg = write_cfg(tmp_path, quintic_cfg(paths=20))
    run(tmp_path, "simulate", cfg)
    run(tmp_path, "simulate", cfg, "--seed", "3")
    a, b = sorted((tmp_path / "runs").iterdir())
    assert a.name.split("-")[0] == b.name.split("-")[0]
    assert (a / "paths.csv").read_bytes() != (b / "paths.csv").read_bytes()
