import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ouscore.cli import main, run
from ouscore.config import OUTPUT_DIR_ENV, ConfigError, apply_overrides, load_config

MINIMAL = """
[[target.components]]
weight = 1.0
mean = [2.0]
cov = 1.0
"""

SMALL = {
    "sample": ["n_particles=2000", "n_steps=40"],
    "score-error": ["cloud_size=2000", "grid_size=5", "horizon=2.0"],
    "verify": ["cloud_size=2000", "grid_size=5"],
    "covering": ["epsilons=[0.5, 0.8]"],
    "kl": ["n_particles=500", "n_steps=20", "horizon=2.0", "drift='semigroup_estimator'", "cloud_size=1000"],
    "mixing": ["n_particles=5000", "n_steps=50", "horizons=[1.0, 2.0]", "horizon=2.0"],
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(MINIMAL)
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_config_uses_defaults(config_file):
    cfg = load_config(config_file)
    assert cfg.sigma == 1.0 and cfg.horizon == 4.0
    assert {"sigma", "horizon", "n_steps", "seed", "schedule"} <= set(cfg.defaults_used)
    echo = cfg.to_dict()
    assert echo["defaults_used"] == cfg.defaults_used
    assert echo["schedule"] == {"kind": "constant", "beta": 1.0}


def test_negative_sigma_named(config_file):
    with pytest.raises(ConfigError, match="sigma"):
        load_config(config_file, ["sigma=-1"])


def test_unknown_key_named(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("betaa = 1.0\n" + MINIMAL)
    with pytest.raises(ConfigError, match="betaa"):
        load_config(str(path))
    with pytest.raises(ConfigError, match="betaa"):
        load_config(None, ["schedule.betaa=2"])


def test_parse_error_has_line_number(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("sigma = 1.0\nhorizon = = 4\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_config(str(path))


@pytest.mark.parametrize("override, name", [
    ("n_steps=5", "n_steps"),
    ("cloud_size=1", "cloud_size"),
    ("drift='magic'", "drift"),
    ("epsilons=[0.0]", "epsilons"),
    ("c=1.5", "c"),
    ("schedule.kind='cosine'", "schedule.kind"),
    ("n_particles=1.5", "n_particles"),
])
def test_validation_names_field(override, name):
    with pytest.raises(ConfigError, match=name):
        load_config(None, [override])


def test_target_validation(tmp_path):
    path = tmp_path / "t.toml"
    path.write_text("[[target.components]]\nweight = 0.5\nmean = [0.0]\ncov = 1.0\n")
    with pytest.raises(ConfigError, match="target"):
        load_config(str(path))
    path.write_text("sigma = 1.0\n")
    with pytest.raises(ConfigError, match="target"):
        load_config(str(path))


def test_overrides():
    raw = apply_overrides({"schedule": {"kind": "constant"}}, ["schedule.beta=2", "seed=7", "output_dir=out/x"])
    assert raw == {"schedule": {"kind": "constant", "beta": 2}, "seed": 7, "output_dir": "out/x"}
    # switching kind replaces the whole table; stale keys of the old kind are rejected
    cfg = load_config(None, ["schedule={kind='linear', beta_min=0.5, beta_max=2.0}"])
    assert cfg.schedule.kind == "linear" and cfg.schedule.beta_max == 2.0
    with pytest.raises(ConfigError, match="beta"):
        load_config(None, ["schedule.kind='linear'", "schedule.beta_min=0.5", "schedule.beta_max=2.0"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env-out"))
    cfg = load_config(None)
    assert cfg.output_dir == str(tmp_path / "env-out")
    assert "output_dir" not in cfg.defaults_used


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run("plot", None) == 2
    assert run("sample", None, ["sigma=-1"]) == 2
    assert "sigma" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--bogus"])
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "ouscore", "verify", "--set", "betaa=1"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2 and "betaa" in proc.stderr


def run_small(name, tmp_path, extra=()):
    out = tmp_path / "out"
    status = main([name, "--set", f"output_dir='{out}'", *sum((["--set", o] for o in SMALL[name]), []), *extra])
    return status, out / name


@pytest.mark.parametrize("name", sorted(SMALL))
def test_subcommand_writes_manifest(name, tmp_path):
    status, out = run_small(name, tmp_path)
    assert status == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exit_status"] == 0 and manifest["error"] is None
    assert manifest["seed"] == 0
    assert set(manifest["versions"]) >= {"python", "numpy", "scipy", "numba", "artifact"}
    assert manifest["wall_clock"]["seconds"] >= 0
    assert manifest["config"]["defaults_used"]
    for f in manifest["files"]:
        assert (out / f).exists()


def test_sample_outputs(tmp_path):
    status, out = run_small("sample", tmp_path)
    rows = read_csv(out / "samples.csv")
    assert len(rows) == 2000 and list(rows[0]) == ["x_0"]
    x = np.array([float(r["x_0"]) for r in rows])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean"][0] == pytest.approx(x.mean(), rel=1e-12)
    assert abs(x.mean() - 2.0) < 4 * x.std() / np.sqrt(x.size) + 0.02
    assert "output_dir" not in summary["config"]


def test_sample_paths(tmp_path):
    status, out = run_small("sample", tmp_path, ["--set", "n_particles=3", "--set", "record_paths=true"])
    rows = read_csv(out / "paths.csv")
    assert len(rows) == 41 * 3
    assert float(rows[-1]["time"]) == 4.0


def test_score_error_columns(tmp_path):
    status, out = run_small("score-error", tmp_path)
    rows = read_csv(out / "score_error.csv")
    assert list(rows[0]) == ["t", "x_0", "est_score_0", "oracle_score_0", "abs_err"]
    assert len(rows) == 25


def test_verify_report(tmp_path):
    status, out = run_small("verify", tmp_path)
    report = json.loads((out / "verify.json").read_text())
    assert report["pass"]
    names = [e["name"] for e in report["lemmas"]]
    assert names == ["metric_axioms", "envelope", "l2_lipschitz", "commutation", "drift_regularity"]
    for e in report["lemmas"]:
        assert set(e) == {"name", "statement", "trials", "violations", "max_residual", "pass"}
        assert e["pass"] and e["violations"] == 0


def test_covering_rows(tmp_path):
    status, out = run_small("covering", tmp_path)
    rows = read_csv(out / "covering.csv")
    assert [r["epsilon"] for r in rows] == ["0.5", "0.80000000000000004"]
    assert all(r["holds"] == "true" for r in rows)


def test_kl_and_mixing_reports(tmp_path):
    _, out = run_small("kl", tmp_path)
    kl = json.loads((out / "kl.json").read_text())
    assert {"estimate", "std_error", "n_paths", "config"} <= set(kl)
    assert kl["estimate"] >= -3 * kl["std_error"]
    _, out = run_small("mixing", tmp_path)
    rows = read_csv(out / "mixing.csv")
    assert [r["T"] for r in rows] == ["1", "2"]
    assert json.loads((out / "mixing.json").read_text())["monotone"]


def test_failure_exit_1_names_operation(tmp_path, capsys):
    # the supplied Lipschitz constant is far below what the ratio shows on the ball
    status, out = run_small("score-error", tmp_path, ["--set", "L=0.01", "--set", "c=0.1"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert status == 1 and manifest["exit_status"] == 1
    assert manifest["error"].startswith("targets.")
    assert "ContractViolation" in manifest["error"]
    assert "targets." in capsys.readouterr().err


def test_rerun_bitwise_identical(tmp_path):
    for name in ("sample", "covering"):
        _, out = run_small(name, tmp_path)
        first = {f: (out / f).read_bytes() for f in os.listdir(out) if f != "manifest.json"}
        _, out = run_small(name, tmp_path)
        assert first == {f: (out / f).read_bytes() for f in os.listdir(out) if f != "manifest.json"}
