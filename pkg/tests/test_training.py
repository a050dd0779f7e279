"""Tests for the training loop, evaluation reports, and report writers."""

from __future__ import annotations

import numpy as np
import pytest

from atlasseg.synth import SceneParams, generate
from atlasseg.topology import builtin_spec
from atlasseg.training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    format_report,
    metrics_from_predictions,
    overfit_single,
    train,
    training_atlas,
    write_history_csv,
    write_report,
)


def tiny_config(**overrides) -> TrainConfig:
    settings = dict(variant="panet", epochs=2, batch_size=4, depth=2,
                    base_channels=2, pose_hidden=4, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def retina_data():
    samples = generate(SceneParams(regime="retina2d", size=16, seed=0, distractor_count=1), 10)
    return samples[:8], samples[8:]


def test_train_returns_history_and_best_epoch(retina_data):
    tr, va = retina_data
    result = train(tiny_config(), tr, va, builtin_spec("retina"))
    assert len(result.history) == 2
    assert 0 <= result.best_epoch < 2
    for row in result.history:
        assert set(row) >= {"epoch", "loss", "l_seg", "l_pose", "val_jaccard", "val_ter"}
        assert np.isfinite(row["loss"])


def test_train_is_deterministic(retina_data):
    tr, va = retina_data
    a = train(tiny_config(), tr, va, builtin_spec("retina"))
    b = train(tiny_config(), tr, va, builtin_spec("retina"))
    assert a.history == b.history
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])


def test_plain_variant_has_zero_pose_loss(retina_data):
    tr, va = retina_data
    result = train(tiny_config(variant="plain"), tr, va, builtin_spec("retina"))
    assert all(row["l_pose"] == 0.0 for row in result.history)


def test_divergence_is_reported(retina_data):
    tr, va = retina_data
    with pytest.raises(TrainingDiverged):
        train(tiny_config(learning_rate=1e6, epochs=3), tr, va, builtin_spec("retina"))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)


def test_config_json_round_trip():
    cfg = tiny_config(loss_weights=(2.0, 0.5))
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_evaluate_report_fields(retina_data):
    tr, va = retina_data
    cfg = tiny_config()
    result = train(cfg, tr, va, builtin_spec("retina"))
    atlas = training_atlas(cfg, "retina2d", 16)
    report = evaluate(result.params, result.arch, va, atlas, builtin_spec("retina"))
    assert report["classes"] == ["disc", "cup"]
    assert len(report["jaccard_percent"]) == 2
    assert 0 <= report["jaccard_mean"] <= 100
    k, n = report["ter"]
    assert 0 <= k <= n == len(va)
    assert report["orientation_error_deg"] is not None
    assert report["localization_error_px"] is not None


def test_evaluate_plain_has_no_pose_metrics(retina_data):
    tr, va = retina_data
    cfg = tiny_config(variant="plain")
    result = train(cfg, tr, va, builtin_spec("retina"))
    atlas = training_atlas(cfg, "retina2d", 16)
    report = evaluate(result.params, result.arch, va, atlas, builtin_spec("retina"))
    assert report["orientation_error_deg"] is None
    assert report["localization_error_px"] is None


def test_metrics_from_predictions_perfect(retina_data):
    tr, _ = retina_data
    truths = [s.labels for s in tr]
    report = metrics_from_predictions(truths, truths, builtin_spec("retina"))
    assert report["jaccard_mean"] == pytest.approx(100.0)
    assert report["ter"][0] == 0


def test_overfit_single_loss_decreases():
    sample = generate(SceneParams(regime="retina2d", size=16, seed=3,
                                  noise_sigma=0.0, distractor_count=0), 1)[0]
    losses = overfit_single(tiny_config(learning_rate=5e-3), sample, steps=60)
    assert len(losses) == 60
    assert losses[-1] < losses[0]


def test_history_csv_writeout_is_stable(tmp_path, retina_data):
    tr, va = retina_data
    result = train(tiny_config(), tr, va, builtin_spec("retina"))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_history_csv(a, result.history)
    write_history_csv(b, result.history)
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0].startswith("epoch,")
    assert len(lines) == 1 + len(result.history)


def test_report_writer_and_formatter(tmp_path):
    report = {
        "classes": ["disc", "cup"],
        "jaccard_percent": [90.0, 80.0],
        "jaccard_mean": 85.0,
        "ter": (1, 4),
        "orientation_error_deg": 12.5,
        "localization_error_px": 1.75,
    }
    out = tmp_path / "metrics.csv"
    write_report(out, report)
    text = out.read_text()
    assert "disc,90" in text
    assert "ter,1/4" in text
    pretty = format_report(report)
    assert "TER: 1/4" in pretty
    assert "12.50 deg" in pretty
