"""Smoke tests for the command-line entry point"""
import json

import pandas as pd
import pytest
import torch

from src.cli import main
from src.core.persistence import save_tensor
from tests.conftest import tiny_raw_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(tiny_raw_config()))
    return path


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def test_gen_pretrain_eval_params(config_file, tmp_path, capsys):
    """Dataset generation, stage A, evaluation and parameter counts in one run directory"""
    out = tmp_path / "run"
    for command in ("gen-data", "pretrain", "eval", "params"):
        assert _run(command, "--config", config_file, "--out", out) == 0, command

    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert result["status"] == "success"
    assert (out / "data" / "manifest.json").exists()
    assert (out / "checkpoints" / "pretrain.ckpt").exists()
    assert (out / "eval_metrics.csv").exists()
    assert (out / "params.csv").exists()
    assert (out / "run.log").exists()

    manifest = json.loads((out / "manifest.json").read_text())
    assert [r["command"] for r in manifest["runs"]] == ["gen-data", "pretrain", "eval", "params"]
    assert {"path": "run.log", "kind": "log"} in manifest["files"]
    saved = json.loads((out / "config.json").read_text())
    assert saved["output_dir"] == str(out)


def test_flags_override_config(config_file, tmp_path):
    """Command-line flags land in the saved config"""
    out = tmp_path / "run"
    assert _run("params", "--config", config_file, "--out", out, "--seed", 7, "--decoder", "conv") == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["seed"] == 7
    assert saved["model"]["decoder"] == "conv"


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    """Unknown keys fail before any job runs"""
    raw = tiny_raw_config()
    raw["model"]["heads"] = 2
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert _run("params", "--config", path, "--out", tmp_path / "run") == 1
    failure = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert failure["key_path"] == "model.heads"
    assert not (tmp_path / "run").exists()


def test_steps_above_horizon_rejected(config_file, tmp_path):
    """--steps larger than T is a config error"""
    assert _run("eval", "--config", config_file, "--out", tmp_path / "run", "--steps", 9) == 1


def test_stage_without_checkpoint_exits_nonzero(config_file, tmp_path):
    """train-diffusion before pretrain fails"""
    assert _run("train-diffusion", "--config", config_file, "--out", tmp_path / "run") == 1


def test_eval_directories(config_file, tmp_path):
    """Identical prediction and ground-truth directories give zero error"""
    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    for index in range(2):
        depth = torch.rand(1, 8, 8) * 10 + 1
        depth[0, 0, 0] = 0.0
        save_tensor(depth, pred_dir / f"{index:06d}.tnsr")
        save_tensor(depth, gt_dir / f"{index:06d}.tnsr")

    out = tmp_path / "run"
    argv = ["eval", "--config", config_file, "--out", out, "--pred-dir", pred_dir, "--gt-dir", gt_dir]
    assert _run(*argv) == 0
    frame = pd.read_csv(out / "eval_metrics.csv")
    overall = frame[frame["bucket"] == "all"].iloc[0]
    assert overall["rmse"] == 0.0
    assert overall["delta1"] == 1.0
    assert overall["count"] == 2 * 63


def test_eval_directories_need_both_flags(config_file, tmp_path):
    """--pred-dir without --gt-dir fails"""
    argv = ["eval", "--config", config_file, "--out", tmp_path / "run", "--pred-dir", tmp_path]
    assert _run(*argv) == 1


def test_gradcheck_checks_nonzero_gradients(config_file, tmp_path):
    """gradcheck on a fresh run compares real gradients, not zeros behind zero-initialized heads"""
    out = tmp_path / "run"
    assert _run("gradcheck", "--config", config_file, "--out", out) == 0
    frame = pd.read_csv(out / "gradcheck.csv").set_index("component")
    assert frame["passed"].all()
    assert (frame["informative"] > 0).all()
    assert frame.loc["invdec", "zero_gradient_params"] == 0
    assert frame.loc["diffusion.level3", "zero_gradient_params"] == 0


def test_gradcheck_uses_latest_checkpoint(config_file, tmp_path):
    """With a stage A checkpoint the check runs on the trained weights"""
    out = tmp_path / "run"
    assert _run("pretrain", "--config", config_file, "--out", out) == 0
    assert _run("gradcheck", "--config", config_file, "--out", out) == 0
    frame = pd.read_csv(out / "gradcheck.csv")
    assert (frame["informative"] > 0).all()
