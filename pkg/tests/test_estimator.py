"""Tests for the scikit-learn style estimator facade."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone

from atlasseg.estimator import AtlasSegmenter
from atlasseg.synth import SceneParams, generate


def small_dataset(n: int = 10, seed: int = 0):
    params = SceneParams(regime="retina2d", size=16, seed=seed, distractor_count=0)
    samples = generate(params, n)
    X = np.stack([s.image for s in samples])
    y = np.stack([s.labels for s in samples])
    poses = [s.pose for s in samples]
    return X, y, poses


def quick_estimator(**overrides) -> AtlasSegmenter:
    settings = dict(
        regime="retina2d", variant="panet", epochs=2, batch_size=4,
        depth=2, base_channels=2, pose_hidden=4, seed=0,
    )
    settings.update(overrides)
    return AtlasSegmenter(**settings)


def test_fit_predict_shapes():
    X, y, poses = small_dataset()
    est = quick_estimator().fit(X, y, poses=poses)
    preds = est.predict(X)
    assert preds.shape == y.shape
    assert preds.dtype == np.int64
    assert set(np.unique(preds)) <= {0, 1, 2}


def test_predict_pose_returns_poses():
    X, y, poses = small_dataset()
    est = quick_estimator().fit(X, y, poses=poses)
    predicted = est.predict_pose(X[:2])
    assert len(predicted) == 2
    for pose in predicted:
        assert len(pose.translation) == 2
        assert all(s > 0 for s in pose.scale)


def test_score_is_mean_jaccard_in_unit_interval():
    X, y, poses = small_dataset()
    est = quick_estimator().fit(X, y, poses=poses)
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0


def test_unfitted_predict_raises():
    with pytest.raises(RuntimeError):
        quick_estimator().predict(np.zeros((1, 16, 16)))


def test_channel_axis_is_optional():
    X, y, poses = small_dataset(n=6)
    est = quick_estimator().fit(X[:, 0], y, poses=poses)
    a = est.predict(X[:2])
    b = est.predict(X[:2, 0])
    np.testing.assert_array_equal(a, b)


def test_input_validation():
    est = quick_estimator()
    X, y, _ = small_dataset(n=4)
    with pytest.raises(ValueError):
        est.fit(X, y[:, :8])  # label shape mismatch
    with pytest.raises(ValueError):
        est.fit(X, y, poses=[None])  # wrong pose count
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        est.fit(bad, y)
    with pytest.raises(ValueError):
        quick_estimator(regime="nope").fit(X, y)


def test_fit_is_deterministic():
    X, y, poses = small_dataset(n=8)
    a = quick_estimator().fit(X, y, poses=poses)
    b = quick_estimator().fit(X, y, poses=poses)
    for name in a.params_:
        np.testing.assert_array_equal(a.params_[name], b.params_[name])


def test_sklearn_clone_and_get_params():
    est = quick_estimator(variant="naive", epochs=5)
    params = est.get_params()
    assert params["variant"] == "naive"
    assert params["epochs"] == 5
    cloned = clone(est)
    assert cloned.get_params() == params


def test_plain_variant_fits_without_poses():
    X, y, _ = small_dataset(n=8)
    est = quick_estimator(variant="plain").fit(X, y)
    assert est.predict(X[:1]).shape == (1, 16, 16)
