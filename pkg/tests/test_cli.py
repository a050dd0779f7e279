"""End-to-end tests of the command-line interface.

A tiny retina pipeline is exercised for real: generate data, train, eval,
re-score, warp, and check determinism of the written artifacts.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from atlasseg.cli import EXIT_CONFIG, EXIT_OK, load_config, main
from atlasseg.cli import ConfigError


def write_config(path: Path, **overrides) -> Path:
    config = {
        "schema_version": 1,
        "regime": "retina2d",
        "seed": 0,
        "output_dir": str(path.parent / "runs"),
        "scene": {"size": 16, "distractor_count": 1},
        "dataset": {"n_train": 6, "n_val": 2, "n_test": 2},
        "train": {"epochs": 2, "batch_size": 4, "depth": 2, "base_channels": 2,
                  "pose_hidden": 4},
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full gen-data -> train -> eval run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json")
    data = root / "data"
    train_out = root / "train"
    eval_out = root / "eval"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(data),
                 "--variant", "panet", "--out", str(train_out)]) == EXIT_OK
    assert main(["eval", "--config", str(cfg), "--data", str(data),
                 "--checkpoint", str(train_out / "checkpoint"),
                 "--out", str(eval_out)]) == EXIT_OK
    return {"root": root, "cfg": cfg, "data": data, "train": train_out, "eval": eval_out}


def test_gen_data_outputs(pipeline):
    data = pipeline["data"]
    for part, n in (("train", 6), ("val", 2), ("test", 2)):
        manifest = json.loads((data / part / "manifest.json").read_text())
        assert manifest["num_samples"] == n
    assert (data / "resolved_config.json").exists()


def test_train_outputs(pipeline):
    out = pipeline["train"]
    assert (out / "checkpoint" / "arch.json").exists()
    header = (out / "history.csv").read_text().splitlines()[0]
    assert "epoch" in header


def test_eval_outputs(pipeline):
    out = pipeline["eval"]
    text = (out / "metrics.csv").read_text()
    assert "jaccard" in text
    assert "ter" in text


def test_metrics_command_scores_saved_predictions(pipeline, tmp_path):
    from atlasseg.tensorio import save_tgrid
    from atlasseg.synth import load_dataset

    samples, _ = load_dataset(pipeline["data"] / "test")
    pred_dir = tmp_path / "preds"
    pred_dir.mkdir()
    for i, s in enumerate(samples):
        save_tgrid(pred_dir / f"labels_{i:04d}.tgrid", s.labels.astype(np.float64))
    out = tmp_path / "metrics"
    assert main(["metrics", "--data", str(pipeline["data"] / "test"),
                 "--pred", str(pred_dir), "--topology", "retina",
                 "--out", str(out)]) == EXIT_OK
    # Perfect predictions: Jaccard 1, no topology violations.
    text = (out / "metrics.txt").read_text()
    assert "100.00" in text
    assert "TER: 0/2" in text


def test_warp_command(pipeline, tmp_path):
    from atlasseg.atlas import save_atlas
    from atlasseg.posewarp import Pose, save_pose
    from atlasseg.synth import canonical_atlas

    atlas_dir = tmp_path / "atlas"
    save_atlas(atlas_dir, canonical_atlas("retina2d", 16, softness=0.1))
    pose_path = tmp_path / "pose.json"
    save_pose(pose_path, Pose((0.1, 0.0), (1.0, 1.0), (0.2,)))
    out = tmp_path / "warped"
    assert main(["warp", "--atlas", str(atlas_dir), "--pose", str(pose_path),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "warped" / "atlas.json").exists()
    assert list((out / "previews").iterdir())


def test_identical_configs_give_byte_identical_outputs(tmp_path):
    outputs = []
    for run in ("a", "b"):
        root = tmp_path / run
        root.mkdir()
        cfg = write_config(root / "config.json", output_dir=str(root / "runs"))
        data = root / "data"
        train_out = root / "train"
        assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--variant", "panet", "--out", str(train_out)]) == EXIT_OK
        outputs.append(root)
    a, b = outputs
    assert (a / "train" / "history.csv").read_bytes() == (b / "train" / "history.csv").read_bytes()
    for tgrid in sorted((a / "train" / "checkpoint").glob("*.tgrid")):
        twin = b / "train" / "checkpoint" / tgrid.name
        assert tgrid.read_bytes() == twin.read_bytes(), tgrid.name


def test_seed_override_changes_data(tmp_path):
    cfg = write_config(tmp_path / "config.json")
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg), "--out", str(a), "--seed", "1"]) == EXIT_OK
    assert main(["gen-data", "--config", str(cfg), "--out", str(b), "--seed", "2"]) == EXIT_OK
    assert (a / "train" / "image_0000.tgrid").read_bytes() != (b / "train" / "image_0000.tgrid").read_bytes()


@pytest.mark.parametrize(
    "mutate",
    [
        {"schema_version": 99},
        {"bogus_key": 1},
        {"scene": {"no_such_field": 2}},
        {"train": {"learning_rate": "fast"}},
        {"scene": {"translation_range": 5.0}},
    ],
)
def test_malformed_config_exits_2(tmp_path, mutate):
    cfg = write_config(tmp_path / "config.json", **mutate)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_missing_mandatory_keys(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schema_version": 1, "regime": "retina2d"}))
    with pytest.raises(ConfigError, match="seed"):
        load_config(cfg)
    cfg.write_text(json.dumps({"schema_version": 1, "seed": 0}))
    with pytest.raises(ConfigError, match="regime"):
        load_config(cfg)


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_out_root_env_prefixes_relative_paths(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "config.json")
    monkeypatch.setenv("ATLASSEG_OUT_ROOT", str(tmp_path / "rooted"))
    assert main(["gen-data", "--config", str(cfg), "--out", "dataset"]) == EXIT_OK
    assert (tmp_path / "rooted" / "dataset" / "train" / "manifest.json").exists()
