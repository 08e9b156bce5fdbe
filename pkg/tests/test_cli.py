import csv
import json
import subprocess
import sys

import pytest

from omav_door.cli import MANIFEST_NAME, main
from omav_door.env import TRACE_COLUMNS
from omav_door.evaluation import RESULT_COLUMNS

TINY_TRAIN = ["--override", "ppo.num_envs=2", "--override", "ppo.steps_per_env=10",
              "--override", "ppo.minibatch_size=10", "--override", "ppo.total_steps=20"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), "--seed", "3", *TINY_TRAIN]) == 0
    return out


def test_train_outputs_and_manifest(trained):
    assert (trained / "final.npz").is_file()
    rows = list(csv.DictReader((trained / "metrics.csv").open()))
    assert len(rows) == 1 and rows[0]["env_steps"] == "20"
    manifest = json.loads((trained / MANIFEST_NAME).read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 3
    assert manifest["config"]["ppo"]["seed"] == 3 and manifest["config"]["ppo"]["num_envs"] == 2
    assert manifest["finished_at"] >= manifest["started_at"]
    assert "numpy" in manifest["version"]


def test_train_with_zero_steps(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--override", "ppo.total_steps=0"]) == 0
    assert (tmp_path / "final.npz").is_file()


@pytest.mark.parametrize("argv", [[], ["fly"], ["train"], ["eval", "--out", "x", "--controller", "pid"],
                                  ["train", "--out", "x", "--seed", "abc"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--override", "ppo.sead=1"]) == 1
    assert "ppo.sead" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path), "--config", str(tmp_path / "none.yaml")]) == 1


def test_eval_policy_writes_results_and_traces(trained, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", "--out", str(out), "--controller", "policy", "--checkpoint", str(trained / "final.npz"),
                 "--experiment", "lateral_offset", "--values", "0.0", "0.03", "--trials", "2", "--timeout", "0.1",
                 "--traces"])
    assert code == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert tuple(rows[0]) == RESULT_COLUMNS
    assert [r["value"] for r in rows] == ["0.0", "0.03"]
    assert len(list((out / "traces").glob("*.csv"))) == 4
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert manifest["experiment"]["trials_per_value"] == 2


def test_eval_missing_checkpoint_exits_2(tmp_path):
    code = main(["eval", "--out", str(tmp_path), "--controller", "policy", "--checkpoint",
                 str(tmp_path / "missing.npz"), "--experiment", "door_closing"])
    assert code == 2
    assert not (tmp_path / "results.csv").exists()


def test_eval_spec_file(tmp_path):
    spec = tmp_path / "spec.yaml"
    spec.write_text("kind: initial_distance\nvalues: [0.2]\ntrials_per_value: 1\ntimeout_seconds: 0.05\n"
                    "controller: mppi\n")
    out = tmp_path / "out"
    assert main(["eval", "--out", str(out), "--spec", str(spec), "--override", "mppi.num_samples=4",
                 "--override", "mppi.horizon_steps=2"]) == 0
    assert len(list(csv.DictReader((out / "results.csv").open()))) == 1
    spec.write_text("kind: initial_distance\ntrails: 3\n")
    assert main(["eval", "--out", str(out), "--spec", str(spec)]) == 1
    assert main(["eval", "--out", str(out)]) == 1  # no experiment kind anywhere


@pytest.fixture()
def trace(tmp_path, trained):
    out = tmp_path / "eval"
    assert main(["eval", "--out", str(out), "--checkpoint", str(trained / "final.npz"), "--experiment",
                 "vertical_offset", "--values", "0.0", "--trials", "1", "--timeout", "0.3", "--traces"]) == 0
    (path,) = (out / "traces").glob("*.csv")
    return path


def test_replay_clean_trace(trace, capsys):
    assert main(["replay", str(trace)]) == 0
    assert capsys.readouterr().out.strip().endswith("30 rows checked, 0 divergent")


def test_replay_reports_first_divergence(trace, tmp_path, capsys):
    lines = trace.read_text().splitlines()
    col = TRACE_COLUMNS.index("total")
    for n in (5, 9):
        fields = lines[n - 1].split(",")
        fields[col] = repr(float(fields[col]) + 1.0)
        lines[n - 1] = ",".join(fields)
    tampered = tmp_path / "t.csv"
    tampered.write_text("\n".join(lines) + "\n")
    assert main(["replay", str(tampered)]) == 2
    out = capsys.readouterr().out
    assert "first divergence at line 5" in out and "total" in out
    assert "30 rows checked, 2 divergent" in out
    assert main(["replay", str(tampered), "--tolerance", "2.0"]) == 0


def test_replay_malformed_and_empty(trace, tmp_path, capsys):
    lines = trace.read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 1)[0]
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["replay", str(bad)]) == 1
    assert "line 4" in capsys.readouterr().err
    lines = trace.read_text().splitlines()
    lines[2] = lines[2].replace(lines[2].split(",")[1], "abc", 1)
    bad.write_text("\n".join(lines) + "\n")
    assert main(["replay", str(bad)]) == 1
    bad.write_text("time,alpha\n1,2\n")
    assert main(["replay", str(bad)]) == 1
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["replay", str(empty)]) == 0
    header_only = tmp_path / "header.csv"
    header_only.write_text(",".join(TRACE_COLUMNS) + "\n")
    assert main(["replay", str(header_only)]) == 0
    assert "0 rows checked, 0 divergent" in capsys.readouterr().out
    assert main(["replay", str(tmp_path / "missing.csv")]) == 1


def test_replay_verbose_prints_rows(trace, capsys):
    assert main(["replay", str(trace), "--verbose"]) == 0
    assert capsys.readouterr().out.count("recomputed=") == 30


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "omav_door", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "omav_door", "replay"], capture_output=True, text=True)
    assert proc.returncode == 1
