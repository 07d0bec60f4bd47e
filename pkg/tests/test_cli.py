import json

import pytest
import torch

from t2dm_screen import training
from t2dm_screen.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, run_cli
from toys import RESNET_TINY


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "train.json"
    cfg.write_text(json.dumps({"max_epochs": 1, "batch_size": 16, "lr": 1e-3, "model_config": RESNET_TINY}))
    assert run_cli(["genfixture", "--patients", "40", "--seed", "2", "--out", str(d / "raw")]) == EXIT_OK
    assert run_cli(["build", "--raw", str(d / "raw"), "--out", str(d / "ds"), "--seed", "1"]) == EXIT_OK
    assert run_cli(["train", "--dataset", str(d / "ds"), "--model", "resnet-lstm", "--config", str(cfg),
                    "--out", str(d / "runs/joint")]) == EXIT_OK
    return d


def test_build_outputs(pipeline):
    names = {p.name for p in (pipeline / "ds").iterdir()}
    assert {"manifest.json", "config.json"} <= names
    echo = json.loads((pipeline / "ds/config.json").read_text())
    assert echo["build_config"]["seed"] == 1


def test_eval_ablate_report(pipeline, capsys):
    run = pipeline / "runs/joint"
    assert json.loads((run / "config.json").read_text())["train_config"]["max_epochs"] == 1
    assert run_cli(["eval", "--run", str(run), "--bootstrap", "50"]) == EXIT_OK
    ev = json.loads((run / "eval.json").read_text())
    assert set(ev["report"]) == {"AUROC", "AUPRC", "Accuracy"}
    lines = (run / "scores.csv").read_text().splitlines()
    assert lines[0] == "id,label,score" and len(lines) > 1
    assert run_cli(["ablate", "--run", str(run), "--kind", "missing", "--bootstrap", "20"]) == EXIT_OK
    assert (run / "ablation_missing_cxr.csv").is_file()
    assert run_cli(["report", "--runs", str(pipeline / "runs")]) == EXIT_OK
    table = (pipeline / "runs/results.txt").read_text()
    assert "ResNet-LSTM_Joint" in table and "D_E+C+G" in table
    assert "missing" in (pipeline / "runs/ablations.txt").read_text()
    capsys.readouterr()


def test_toml_config(pipeline, tmp_path):
    cfg = tmp_path / "t.toml"
    cfg.write_text('max_epochs = 1\nbatch_size = 16\n[model_config]\nhidden = 4\nimage_side = 32\n'
                   '[model_config.cnn]\nstem_width = 4\nplanes = [4]\nblocks = [1]\n')
    assert run_cli(["train", "--dataset", str(pipeline / "ds"), "--model", "resnet-lstm", "--strategy", "early",
                    "--config", str(cfg), "--out", str(tmp_path / "run")]) == EXIT_OK
    echo = json.loads((tmp_path / "run/config.json").read_text())
    assert echo["train_config"]["strategy"] == "early" and echo["model_config"]["hidden"] == 4


def test_usage_errors(capsys):
    assert run_cli([]) == EXIT_USAGE
    assert run_cli(["frobnicate"]) == EXIT_USAGE
    assert run_cli(["train", "--model", "vilt"]) == EXIT_USAGE
    assert run_cli(["--help"]) == EXIT_OK
    capsys.readouterr()


def test_data_errors(pipeline, tmp_path, capsys):
    assert run_cli(["build", "--raw", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert run_cli(["eval", "--run", str(tmp_path)]) == EXIT_DATA
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"momentum": 0.9}))
    assert run_cli(["train", "--dataset", str(pipeline / "ds"), "--model", "vilt", "--config", str(bad),
                    "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert run_cli(["report", "--runs", str(tmp_path)]) == EXIT_DATA
    assert "error" in capsys.readouterr().err


def test_divergence_exit_code(pipeline, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(training, "bce_loss", lambda y, p, eps=1e-7: torch.tensor(float("nan"), requires_grad=True))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"max_epochs": 1, "model_config": RESNET_TINY}))
    out = tmp_path / "run"
    assert run_cli(["train", "--dataset", str(pipeline / "ds"), "--model", "resnet-lstm", "--config", str(cfg),
                    "--out", str(out)]) == EXIT_DIVERGED
    assert (out / "history.json").is_file()
    assert "diverged" in capsys.readouterr().err
