import json
import os

import numpy as np
import pytest

from app.commands import COMMANDS, STAGE1_FILE, STAGE2_FILE
from app.main import EXIT_CHECKS_FAILED, EXIT_ERROR, EXIT_OK, run
from models.schemas import CommandResult
from services.config_service import MANIFEST_FILE, RESOLVED_FILE
from services.dataset_service import gen_sines, read_windows_csv, write_windows_csv

TINY = [
    "data.n_windows=128", "data.seq_len=8", "data.features=2",
    "vq.codebook_size=8", "vq.code_dim=8", "vq.hidden=8", "vq.enc_dec_layers=1", "vq.epochs=1",
    "flow.d_model=16", "flow.heads=2", "flow.layers=1", "flow.train_steps=3", "flow.ode_steps=2",
    "flow.batch_size=8", "scaffold.rank=3", "metrics.hidden=8", "metrics.iterations=20",
]


def _sets(*extra):
    args = []
    for item in TINY + list(extra):
        args += ["--set", item]
    return args


def _manifest(out):
    with open(os.path.join(out, MANIFEST_FILE), encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    stage1_dir, stage2_dir = str(root / "stage1"), str(root / "stage2")
    assert run(["train-vqvae", "--out", stage1_dir, "--seed", "0"] + _sets()) == EXIT_OK
    stage1 = os.path.join(stage1_dir, STAGE1_FILE)
    assert run(["train-flow", "--stage1", stage1, "--out", stage2_dir, "--seed", "0"] + _sets()) == EXIT_OK
    return root, stage1, os.path.join(stage2_dir, STAGE2_FILE)


def test_training_writes_checkpoints_and_manifests(trained):
    root, stage1, stage2 = trained
    assert os.path.exists(stage1) and os.path.exists(stage2)
    for name in ("stage1", "stage2"):
        out = str(root / name)
        assert os.path.exists(os.path.join(out, RESOLVED_FILE))
        manifest = _manifest(out)
        assert manifest["exit_code"] == EXIT_OK
        assert all(manifest["checks"].values())
        assert len(manifest["outputs"]["checkpoint_sha256"]) == 64
    assert os.path.exists(str(root / "stage1" / "vq_train_log.csv"))
    assert os.path.exists(str(root / "stage2" / "flow_train_log.csv"))


@pytest.mark.parametrize("mode", ["flow", "kde_only"])
def test_generate(trained, tmp_path, mode):
    _, _, stage2 = trained
    out = str(tmp_path / mode)
    code = run(["generate", "--stage2", stage2, "--n", "12", "--mode", mode, "--out", out, "--seed", "5"] + _sets())
    assert code == EXIT_OK
    windows = read_windows_csv(os.path.join(out, "generated.csv"))
    assert windows.shape == (12, 8, 2)
    assert _manifest(out)["metrics"]["steps_taken"] == (0 if mode == "kde_only" else 2)


def test_generate_is_reproducible(trained, tmp_path):
    _, _, stage2 = trained
    outputs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert run(["generate", "--stage2", stage2, "--n", "6", "--out", out, "--seed", "9"] + _sets()) == EXIT_OK
        outputs.append(read_windows_csv(os.path.join(out, "generated.csv")))
    np.testing.assert_array_equal(outputs[0], outputs[1])


def test_evaluate_writes_a_report(trained, tmp_path, capsys):
    _, stage1, stage2 = trained
    gen_dir = str(tmp_path / "gen")
    assert run(["generate", "--stage2", stage2, "--n", "64", "--out", gen_dir] + _sets()) == EXIT_OK
    out = str(tmp_path / "eval")
    code = run(["evaluate", "--checkpoint", stage1, "--synthetic", os.path.join(gen_dir, "generated.csv"),
                "--out", out] + _sets())
    assert code == EXIT_OK
    with open(os.path.join(out, "report.json"), encoding="utf-8") as f:
        report = json.load(f)
    assert 0.0 <= report["ds"] <= 0.5
    assert report["config_hash"] == _manifest(out)["config_hash"]
    assert "LFD" in capsys.readouterr().out


def test_forecast_keeps_the_history(trained, tmp_path):
    _, _, stage2 = trained
    full = gen_sines(5, 8, features=2, seed=2).windows
    history = write_windows_csv(str(tmp_path / "history.csv"), full[:, :4])
    truth = write_windows_csv(str(tmp_path / "truth.csv"), full)
    out = str(tmp_path / "forecast")
    code = run(["forecast", "--stage2", stage2, "--history", history, "--truth", truth, "--draws", "3",
                "--out", out] + _sets())
    assert code == EXIT_OK
    manifest = _manifest(out)
    assert manifest["checks"]["history_preserved"]
    assert 0.0 <= manifest["metrics"]["coverage"] <= 1.0
    assert os.path.exists(os.path.join(out, "forecast_lower.csv"))


def test_analyze_pinsker(tmp_path):
    out = str(tmp_path / "pinsker")
    code = run(["analyze", "pinsker", "--out", out, "--set", "analyze.pinsker_instances=300",
                "--set", "analyze.velocity_instances=100"])
    assert code == EXIT_OK
    assert _manifest(out)["checks"]["pinsker_all_hold"]


class TestExitCodes:
    def test_missing_checkpoint(self, tmp_path):
        out = str(tmp_path / "missing")
        code = run(["train-flow", "--stage1", str(tmp_path / "absent.ckpt"), "--out", out] + _sets())
        assert code == EXIT_ERROR

    def test_bad_override(self, tmp_path, capsys):
        code = run(["analyze", "pinsker", "--out", str(tmp_path), "--set", "flow.heads=3"])
        assert code == EXIT_ERROR
        assert "ConfigurationError" in capsys.readouterr().err

    def test_tokenizer_conflict(self, trained, tmp_path):
        _, stage1, _ = trained
        code = run(["train-flow", "--stage1", stage1, "--out", str(tmp_path)] + _sets("vq.codebook_size=16"))
        assert code == EXIT_ERROR

    def test_failed_checks(self, tmp_path, monkeypatch):
        monkeypatch.setitem(COMMANDS, "analyze",
                            lambda ctx: CommandResult(command="analyze", checks={"always": False}))
        out = str(tmp_path / "fails")
        assert run(["analyze", "pinsker", "--out", out]) == EXIT_CHECKS_FAILED
        assert _manifest(out)["exit_code"] == EXIT_CHECKS_FAILED
