import csv
import json
import shutil
import subprocess

import pytest

from momaql import cli, trainer
from momaql.errors import TrainingDivergence

SMALL = ["--policy.hidden_dim", "8", "--critic.hidden_dim", "8", "--policy.layers", "2",
         "--critic.layers", "2", "--train.batch_size", "16", "--train.steps_per_epoch", "3",
         "--eval.every", "0", "--eval.episodes", "3"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    path = d / "pm.ndjson"
    assert cli.main(["gen-data", "--env", "pointmass", "--behavior", "medium", "--episodes", "3",
                     "--seed", "7", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--mode", "offline", "--data", str(data), "--epochs", "2",
                     "--out", str(out)] + SMALL) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_data_bandit_count_and_determinism(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    for p in (a, b):
        assert cli.main(["gen-data", "--env", "bandit2d", "--behavior", "mixed", "--episodes", "500",
                         "--seed", "7", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 501


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["gen-data", "--behavior", "mixed", "--episodes", "5", "--out", "x"]) == 2
    assert cli.main(["gen-data", "--env", "moon", "--behavior", "mixed", "--episodes", "5",
                     "--out", str(tmp_path / "x")]) == 2
    assert cli.main([]) == 2
    assert cli.main(["train", "--out", str(tmp_path), "--no.such_key", "1"]) == 2
    assert cli.main(["train", "--out", str(tmp_path), "--train.eta"]) == 2
    assert cli.main(["train", "--out", str(tmp_path)]) == 2  # no dataset
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_3(tmp_path, data):
    bad = tmp_path / "bad.ndjson"
    bad.write_text("not json\n")
    assert cli.main(["train", "--data", str(bad), "--out", str(tmp_path / "r")]) == 3
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3
    assert cli.main(["train", "--data", str(data), "--env.name", "bandit2d",
                     "--out", str(tmp_path / "r")] + SMALL) == 3


def test_divergence_exit_4(monkeypatch, tmp_path, data):
    def boom(*a, **k):
        raise TrainingDivergence("non-finite actor loss", 12)

    monkeypatch.setattr(trainer, "train", boom)
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r")]) == 4


def test_train_outputs(run):
    rows = _rows(run / "metrics.csv")
    assert rows[0] == list(trainer.METRIC_COLUMNS)
    assert len(rows) == 1 + 2 * 3
    assert all(float(r[3]) != 0.0 for r in rows[1:])
    resolved = json.loads((run / "resolved_config").read_text())
    assert resolved["train.epochs"] == 2 and resolved["env.name"] == "pointmass"
    assert (run / "final/manifest.json").exists() and (run / "latest/manifest.json").exists()


def test_bc_forces_eta_zero(data, tmp_path, caplog):
    out = tmp_path / "bc"
    assert cli.main(["train", "--mode", "bc", "--data", str(data), "--epochs", "1",
                     "--train.eta", "0.5", "--out", str(out)] + SMALL) == 0
    assert "ignores train.eta" in caplog.text
    assert json.loads((out / "resolved_config").read_text())["train.eta"] == 0.0
    assert all(float(r[3]) == 0.0 for r in _rows(out / "metrics.csv")[1:])


def test_resolved_config_reproduces_run(run, data, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", str(run / "resolved_config"), "--out", str(out)]) == 0
    a = [r[:-1] for r in _rows(run / "metrics.csv")]
    b = [r[:-1] for r in _rows(out / "metrics.csv")]
    assert a == b
    for f in (run / "final").iterdir():
        assert f.read_bytes() == (out / "final" / f.name).read_bytes()


def test_eval_output(run, capsys):
    assert cli.main(["eval", "--ckpt", str(run / "final"), "--env", "pointmass", "--episodes", "4",
                     "--seed", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "eval_return_mean,eval_return_std,norm_score"
    assert len(lines) == 2 and len([float(x) for x in lines[1].split(",")]) == 3
    assert cli.main(["eval", "--ckpt", str(run / "final"), "--env", "bandit2d"]) == 3
    assert cli.main(["eval", "--ckpt", str(run / "nope")]) == 3


def test_sample_output(run, capsys):
    assert cli.main(["sample", "--ckpt", str(run / "final"), "--state", "0,0,0,0", "--n", "2"]) == 0
    vals = [float(x) for x in capsys.readouterr().out.strip().split(",")]
    assert len(vals) == 2 and all(-1 <= v <= 1 for v in vals)
    assert cli.main(["sample", "--ckpt", str(run / "final"), "--state", "0,0"]) == 3
    assert cli.main(["sample", "--ckpt", str(run / "final"), "--state", "a,b"]) == 2


def test_finetune_continues_steps(run, data, tmp_path):
    out = tmp_path / "ft"
    assert cli.main(["finetune", "--ckpt", str(run / "final"), "--env", "pointmass", "--data",
                     str(data), "--online-steps", "4", "--out", str(out)]) == 0
    steps = [int(r[0]) for r in _rows(out / "metrics.csv")[1:]]
    assert steps == list(range(6, 11))
    assert json.loads((out / "resolved_config").read_text())["train.mode"] == "online-finetune"
    assert cli.main(["finetune", "--ckpt", str(run / "final"), "--env", "bandit2d",
                     "--out", str(out)]) == 3


@pytest.mark.skipif(shutil.which("momaql") is None, reason="console script not installed")
def test_console_script(tmp_path):
    res = subprocess.run(["momaql", "gen-data", "--env", "bandit2d"], capture_output=True, text=True)
    assert res.returncode == 2
