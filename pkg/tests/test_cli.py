import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml
from PIL import Image

from app.main import run
from app.utils.data import load_manifest

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"

FAST = [
    "--config", str(DESK_CONFIG),
    "--set", "data.n_per_class=4",
    "--set", "data.val_n_per_class=2",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=4",
]


def _error(path):
    return json.loads((path / "error.json").read_text(encoding="utf-8"))


def test_synth_data_is_byte_identical(tmp_path):
    for name in ("first", "second"):
        args = ["synth-data", "--seed", "3", "--classes", "2", "--n", "2", "--size", "64", "--output-dir", str(tmp_path / name)]
        assert run(args) == 0
    first, second = tmp_path / "first", tmp_path / "second"
    assert (first / "manifest.csv").read_bytes() == (second / "manifest.csv").read_bytes()
    image = "images/class_1/00001.png"
    assert (first / image).read_bytes() == (second / image).read_bytes()
    manifest = pd.read_csv(first / "manifest.csv")
    assert len(manifest) == 4


def test_synth_manifest_loads_from_any_directory(tmp_path, monkeypatch):
    out = tmp_path / "synth"
    assert run(["synth-data", "--seed", "3", "--classes", "2", "--n", "2", "--size", "64", "--output-dir", str(out)]) == 0
    monkeypatch.chdir(tmp_path)
    dataset = load_manifest(out / "manifest.csv")
    assert len(dataset) == 4
    assert dataset.class_names == ["class_0", "class_1"]
    assert dataset.samples[0].pixels.shape == (3, 64, 64)

    # a manifest can stand in for a dataset root
    train = tmp_path / "train"
    assert run(["train", "--output-dir", str(train), "--set", f"data.root={out / 'manifest.csv'}"] + FAST) == 0
    assert len(pd.read_csv(train / "manifest.csv")) == 4


def test_split_preview_halves(tmp_path):
    face = tmp_path / "face.png"
    Image.fromarray(np.zeros((224, 224, 3), dtype=np.uint8)).save(face)
    assert run(["split-preview", "--image", str(face), "--output-dir", str(tmp_path / "out")]) == 0
    split = json.loads((tmp_path / "out" / "split.json").read_text(encoding="utf-8"))
    assert split == {"height": 224, "left_width": 112, "right_width": 112}
    assert Image.open(tmp_path / "out" / "left.png").size == (112, 224)


def test_synth_flags_are_recorded_in_effective_config(tmp_path):
    out = tmp_path / "synth"
    args = ["synth-data", "--seed", "7", "--classes", "2", "--n", "1", "--size", "64", "--layout", "quadrant",
            "--output-dir", str(out)]
    assert run(args) == 0
    effective = yaml.safe_load((out / "effective_config.yaml").read_text(encoding="utf-8"))
    assert effective["train"]["seed"] == 7
    assert effective["model"]["num_classes"] == 2
    assert effective["model"]["input_size"] == 64
    assert effective["data"]["n_per_class"] == 1
    assert effective["data"]["layout"] == "quadrant"

    # an explicit flag wins over the same key in --set
    out = tmp_path / "flag_wins"
    assert run(args[:-1] + [str(out), "--set", "train.seed=1"]) == 0
    assert yaml.safe_load((out / "effective_config.yaml").read_text(encoding="utf-8"))["train"]["seed"] == 7


def test_split_preview_mirror_flag_sets_config(tmp_path):
    face = tmp_path / "face.png"
    Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8)).save(face)
    out = tmp_path / "mirrored"
    assert run(["split-preview", "--image", str(face), "--mirror-right", "--output-dir", str(out)]) == 0
    assert yaml.safe_load((out / "effective_config.yaml").read_text(encoding="utf-8"))["model"]["mirror_right"] is True


def test_usage_errors_exit_two(tmp_path, monkeypatch):
    monkeypatch.setattr("app.main.OUTPUT_ROOT", str(tmp_path / "runs"))
    assert run(["no-such-command"]) == 2
    error = _error(tmp_path / "runs" / "usage")
    assert error["type"] == "UsageError"
    assert "no-such-command" in error["error"]

    out = tmp_path / "bad_flag"
    assert run(["profile", "--sizes", "big", "--output-dir", str(out)]) == 2
    assert _error(out)["type"] == "UsageError"
    assert "--sizes" in _error(out)["error"]

    assert run(["evaluate", f"--output-dir={out}"]) == 2
    assert "--checkpoint" in _error(out)["error"]

    broken = tmp_path / "broken.yaml"
    broken.write_text("model:\n  alpha: [0.9\n", encoding="utf-8")
    out = tmp_path / "broken"
    assert run(["profile", "--config", str(broken), "--output-dir", str(out)]) == 2
    error = _error(out)
    assert error["type"] == "ConfigurationError"
    assert "line" in error["error"]

    out = tmp_path / "alpha"
    assert run(["profile", "--set", "model.alpha=2", "--output-dir", str(out)]) == 2
    assert "alpha" in _error(out)["error"]


def test_missing_checkpoint_exits_one(tmp_path):
    out = tmp_path / "evaluate"
    assert run(["evaluate", "--checkpoint", str(tmp_path / "missing.pt"), "--output-dir", str(out)] + FAST) == 1
    assert _error(out)["type"] == "LoadError"


def test_failed_runs_leave_identical_records(tmp_path):
    out = tmp_path / "evaluate"
    args = ["evaluate", "--checkpoint", str(tmp_path / "missing.pt"), "--output-dir", str(out)] + FAST
    records = []
    for _ in range(2):
        assert run(args) == 1
        records.append(((out / "error.json").read_bytes(), (out / "run.log").read_bytes()))
    assert records[0] == records[1]
    assert set(_error(out)) == {"error", "type", "detail"}


def test_train_evaluate_saliency_pipeline(tmp_path):
    first, second = tmp_path / "train_a", tmp_path / "train_b"
    assert run(["train", "--output-dir", str(first)] + FAST) == 0
    assert run(["train", "--output-dir", str(second)] + FAST) == 0
    for name in ("metrics.json", "history.csv", "manifest.csv", "effective_config.yaml"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
    assert not (first / "error.json").exists()

    checkpoint = str(first / "checkpoint.pt")
    out = tmp_path / "evaluate"
    assert run(["evaluate", "--checkpoint", checkpoint, "--output-dir", str(out)] + FAST) == 0
    metrics = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert metrics["samples"] == 4
    assert (out / "confusion_matrix.png").exists()
    normalized = pd.read_csv(out / "confusion_normalized.csv", index_col="true")
    assert normalized.shape == (2, 2)

    out = tmp_path / "saliency"
    assert run(["saliency", "--checkpoint", checkpoint, "--output-dir", str(out)] + FAST) == 0
    saliency = json.loads((out / "saliency.json").read_text(encoding="utf-8"))
    assert saliency["target_class"] == 0
    assert sum(saliency["quadrant_mass"]) == pytest.approx(1.0, abs=1e-5)
    assert Image.open(out / "heatmap.png").size == (64, 64)

    out = tmp_path / "cross"
    assert run(["cross-evaluate", "--checkpoint", checkpoint, "--output-dir", str(out)] + FAST) == 0
    assert json.loads((out / "metrics.json").read_text(encoding="utf-8"))["samples"] == 4


def test_profile_writes_separate_latency_table(tmp_path):
    out = tmp_path / "profile"
    assert run(["profile", "--sizes", "128", "--output-dir", str(out)] + FAST) == 0
    table = pd.read_csv(out / "profile.csv")
    assert table["input_size"].tolist() == [128]
    assert (table["flops"] == 2 * table["macs"]).all()
    assert "latency_ms" not in table.columns
    assert pd.read_csv(out / "latency.csv")["input_size"].tolist() == [128]


def test_alpha_sweep_covers_grid(tmp_path):
    out = tmp_path / "sweep"
    assert run(["alpha-sweep", "--output-dir", str(out)] + FAST) == 0
    table = pd.read_csv(out / "alpha_sweep.csv")
    assert len(table) == 11
    assert table["alpha"].iloc[0] == 0.0 and table["alpha"].iloc[-1] == 1.0


@pytest.mark.slow
def test_ablate_all_rows(tmp_path):
    out = tmp_path / "ablate"
    args = ["ablate", "--rows", "a..i", "--output-dir", str(out), "--set", "model.input_size=96"] + FAST
    assert run(args) == 0
    table = pd.read_csv(out / "ablation.csv")
    assert table["row"].tolist() == list("abcdefghi")
    assert table["accuracy"].between(0.0, 1.0).all()
