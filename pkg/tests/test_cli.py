import json
import subprocess
import sys

import pytest

from autolambda.cli import load_config, main
from autolambda.config import ConfigError
from conftest import small_config


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(small_config().to_json())
    return path


def test_run_writes_outputs(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_file), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split("\t") == ["task", "test_metric", "val_metric", "final_lambda", "converged_lambda"]
    for name in ("trajectory.csv", "summary.json", "config.json", "trajectory.png"):
        assert (out / name).exists()


def test_set_and_seed_override(cfg_file):
    cfg = load_config(str(cfg_file), 5, ["strategy.beta=0.001", "strategy.primary=[1]"])
    assert cfg.seed == 5 and cfg.strategy.beta == 0.001 and cfg.strategy.primary == [1]
    with pytest.raises(ConfigError):
        load_config(str(cfg_file), None, ["novalue"])


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"strategy": {"kind": "nope"}}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["compare", "--preset", "nonexistent", "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_infeasible_plan_is_config_error(cfg_file, tmp_path):
    assert main(["run", "--config", str(cfg_file), "--set", "family.input_dim=3", "--out", str(tmp_path / "o")]) == 2


def test_divergence_exit_code(cfg_file, tmp_path, capsys):
    args = ["run", "--config", str(cfg_file), "--set", "strategy.kind=\"equal\"", "--set", "training.lr=1e6", "--set", "training.steps=50", "--out", str(tmp_path / "o")]
    assert main(args) == 3
    assert "numerical divergence" in capsys.readouterr().err
    assert (tmp_path / "o" / "trajectory.csv").exists()


def test_bad_log_level(cfg_file, monkeypatch):
    monkeypatch.setenv("AUTOLAMBDA_LOG_LEVEL", "verbose")
    assert main(["run", "--config", str(cfg_file)]) == 2


def test_compare_file(tmp_path, capsys):
    base = small_config()
    doc = {"configs": {"equal": base.replace(**{"strategy.kind": "equal"}).to_dict(), "autolambda": base.to_dict()}}
    path = tmp_path / "cmp.json"
    path.write_text(json.dumps(doc))
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "compare.csv").exists() and (out / "weights.png").exists()
    assert "single_task" in capsys.readouterr().out


def test_compare_needs_two_and_same_family(tmp_path):
    path = tmp_path / "cmp.json"
    path.write_text(json.dumps({"configs": {"a": small_config().to_dict()}}))
    assert main(["compare", "--config", str(path)]) == 2
    assert main(["compare"]) == 2


def test_grouping_and_relmatrix(cfg_file, tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["grouping", "--config", str(cfg_file), "--out", str(out), "--jobs", "2"]) == 0
    assert (out / "grouping.csv").exists() and (out / "grouping.png").exists()
    assert "# best" in capsys.readouterr().out
    out = tmp_path / "r"
    assert main(["relmatrix", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "relationship.csv").exists() and (out / "relationship.png").exists()


def test_gradcheck_verb(capsys):
    assert main(["gradcheck", "--graphs", "5", "--nets", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["check", "count", "value", "status"]
    assert all(line.endswith("PASS") for line in lines[1:])


def test_module_entry_point(cfg_file, tmp_path):
    out = tmp_path / "m"
    proc = subprocess.run([sys.executable, "-m", "autolambda", "run", "--config", str(cfg_file), "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "trajectory.csv").exists()
