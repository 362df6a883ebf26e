"""End-to-end command line runs on a miniature configuration."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

TINY = """\
preset: lo
train_frames: 6
val_frames: 3
epochs: 1
ct: [2]
channel_scale: 64
lr: 0.0001
"""


def _run(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "fscod.cli", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
        timeout=600,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "run"
    for verb in ("gen-dataset", "train", "eval"):
        res = _run(verb, "--config", str(cfg), "--seed", "21", "--out", str(out))
        assert res.returncode == 0, f"{verb} failed:\n{res.stderr}"
    return root, cfg, out


def test_pipeline_produces_expected_artifacts(workspace):
    _, _, out = workspace
    assert (out / "dataset" / "train.fscd").exists()
    assert (out / "dataset" / "val.fscd").exists()
    assert (out / "params" / "baseline_c2.extractor.fsnn").exists()
    assert (out / "params" / "coop_c2.detector.fsnn").exists()
    assert (out / "params" / "loss_log.csv").exists()
    eval_dir = out / "eval"
    assert (eval_dir / "detections.jsonl").exists()
    for name in ("summary.csv", "categories.csv", "pr_iou.csv", "sizes.csv", "report.txt"):
        assert (eval_dir / name).exists(), name
    figs = list((eval_dir / "figures").glob("*.png"))
    assert len(figs) == 3


def test_detections_file_has_header_and_frames(workspace):
    _, _, out = workspace
    lines = (out / "eval" / "detections.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    assert header["frames"] == 3
    assert "config_hash" in header
    assert len(lines) == 1 + 3
    frame = json.loads(lines[1])
    assert "gt" in frame and "runs" in frame
    assert "coop_c2" in frame["runs"]


def test_loss_log_has_one_row_per_model_epoch(workspace):
    _, _, out = workspace
    rows = [
        line
        for line in (out / "params" / "loss_log.csv").read_text().splitlines()
        if line and not line.startswith("#")
    ]
    assert rows[0] == "model,c_t,epoch,mean_loss"
    assert len(rows) == 1 + 2  # header + baseline and coop, 1 epoch each


def test_report_regeneration_is_byte_identical(workspace):
    _, _, out = workspace
    eval_dir = out / "eval"
    before = {
        p.relative_to(eval_dir): p.read_bytes()
        for p in sorted(eval_dir.rglob("*"))
        if p.is_file()
    }
    res = _run("report", "--out", str(out))
    assert res.returncode == 0, res.stderr
    after = {
        p.relative_to(eval_dir): p.read_bytes()
        for p in sorted(eval_dir.rglob("*"))
        if p.is_file()
    }
    assert before.keys() == after.keys()
    for name in before:
        assert before[name] == after[name], f"{name} changed on regeneration"


def test_missing_seed_is_a_config_error(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY)
    res = _run("gen-dataset", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert res.returncode == 2
    assert "config error" in res.stderr


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY + "wheels: 4\n")
    res = _run("gen-dataset", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o"))
    assert res.returncode == 2
    assert "wheels" in res.stderr


def test_train_without_dataset_is_a_config_error(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text(TINY)
    res = _run("train", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "o"))
    assert res.returncode == 2


def test_stage_hash_mismatch_is_refused(workspace, tmp_path):
    root, cfg, out = workspace
    # same artifacts, different seed: the dataset no longer matches
    res = _run("train", "--config", str(cfg), "--seed", "99", "--out", str(out))
    assert res.returncode == 2
    assert "hash" in res.stderr.lower() or "match" in res.stderr.lower()


def test_eval_of_untrained_channel_width_is_refused(workspace, tmp_path):
    root, cfg, out = workspace
    other = tmp_path / "w.yaml"
    other.write_text(TINY.replace("ct: [2]", "ct: [4]"))
    res = _run("eval", "--config", str(other), "--seed", "21", "--out", str(out))
    assert res.returncode == 2


def test_full_rerun_is_deterministic(workspace, tmp_path_factory):
    root, cfg, out = workspace
    out2 = tmp_path_factory.mktemp("cli2") / "run"
    for verb in ("gen-dataset", "train", "eval"):
        res = _run(verb, "--config", str(cfg), "--seed", "21", "--out", str(out2))
        assert res.returncode == 0, res.stderr
    a = (out / "eval" / "detections.jsonl").read_bytes()
    b = (out2 / "eval" / "detections.jsonl").read_bytes()
    assert a == b
    la = (out / "params" / "loss_log.csv").read_bytes()
    lb = (out2 / "params" / "loss_log.csv").read_bytes()
    assert la == lb
