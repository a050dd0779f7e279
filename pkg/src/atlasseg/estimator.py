"""scikit-learn style estimator wrapping the atlas-guided segmenter.

The estimator trains on arrays of images with per-image label grids and
(optionally) ground-truth poses, and predicts label grids.  It exists so
the model composes with pipelines and parameter search; the CLI and the
lower-level training API remain the primary experiment surface.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .network import predict
from .posewarp import Pose
from .synth import REGIMES, Sample
from .topology import builtin_spec, jaccard
from .training import TrainConfig, TrainResult, train, training_atlas


class AtlasSegmenter(BaseEstimator):
    """Fit a segmentation network with jointly learned atlas registration.

    Parameters mirror TrainConfig; ``regime`` selects the builtin atlas and
    topology ("retina2d" or "synapse3d").
    """

    def __init__(
        self,
        regime: str = "retina2d",
        variant: str = "panet",
        learning_rate: float = 3e-3,
        batch_size: int = 8,
        epochs: int = 30,
        depth: int = 3,
        base_channels: int = 8,
        pose_hidden: int = 32,
        atlas_softness: float = 0.08,
        seed: int = 0,
        validation_fraction: float = 0.2,
    ):
        self.regime = regime
        self.variant = variant
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.depth = depth
        self.base_channels = base_channels
        self.pose_hidden = pose_hidden
        self.atlas_softness = atlas_softness
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _validate_images(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        ndim = 2 if self.regime == "retina2d" else 3
        if X.ndim == ndim + 1:  # (n, *spatial) -> add channel axis
            X = X[:, None]
        if X.ndim != ndim + 2 or X.shape[1] != 1:
            raise ValueError(
                f"expected (n, {ndim} spatial dims) or (n, 1, ...) array, got shape {X.shape}"
            )
        if not np.isfinite(X).all():
            raise ValueError("images contain non-finite values")
        return X

    def _make_samples(self, X, y, poses) -> list[Sample]:
        X = self._validate_images(X)
        y = np.asarray(y)
        if y.shape != (X.shape[0],) + X.shape[2:]:
            raise ValueError(f"label shape {y.shape} does not match images {X.shape}")
        if poses is not None and len(poses) != X.shape[0]:
            raise ValueError("one pose per image required")
        ndim = 2 if self.regime == "retina2d" else 3
        samples = []
        for i in range(X.shape[0]):
            pose = poses[i] if poses is not None else Pose.identity(ndim)
            samples.append(
                Sample(image=X[i], labels=y[i].astype(np.int64), pose=pose, regime=self.regime)
            )
        return samples

    def fit(self, X, y, poses: list[Pose] | None = None) -> "AtlasSegmenter":
        """Train on images X with integer label grids y.

        ``poses`` supervise the pose head; without them the pose target is
        the identity, which only makes sense for centered data.
        """
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        samples = self._make_samples(X, y, poses)
        n_val = int(round(self.validation_fraction * len(samples)))
        val, tr = samples[:n_val], samples[n_val:]
        if not tr:
            raise ValueError("no training samples left after the validation split")
        config = TrainConfig(
            variant=self.variant,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            depth=self.depth,
            base_channels=self.base_channels,
            pose_hidden=self.pose_hidden,
            atlas_softness=self.atlas_softness,
            seed=self.seed,
        )
        spec = builtin_spec("retina" if self.regime == "retina2d" else "synapse")
        size = samples[0].image.shape[-1]
        self.atlas_ = training_atlas(config, self.regime, size)
        result: TrainResult = train(config, tr, val, spec, atlas=self.atlas_)
        self.params_ = result.params
        self.arch_ = result.arch
        self.history_ = result.history
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise RuntimeError("estimator is not fitted; call fit() first")

    def predict(self, X) -> np.ndarray:
        """Per-image hard label grids."""
        self._check_fitted()
        X = self._validate_images(X)
        atlas = self.atlas_.probs if self.arch_.uses_atlas else None
        out = [predict(self.params_, self.arch_, x, atlas)[0] for x in X]
        return np.stack(out)

    def predict_pose(self, X) -> list[Pose]:
        """Predicted registration poses, one per image."""
        self._check_fitted()
        X = self._validate_images(X)
        atlas = self.atlas_.probs if self.arch_.uses_atlas else None
        return [
            Pose.from_raw(predict(self.params_, self.arch_, x, atlas)[1], self.arch_.ndim)
            for x in X
        ]

    def score(self, X, y) -> float:
        """Mean Jaccard over structure classes, in [0, 1]."""
        preds = self.predict(X)
        y = np.asarray(y)
        scores = [
            np.mean([jaccard(p, t, k + 1) for k in range(self.arch_.num_classes)])
            for p, t in zip(preds, y)
        ]
        return float(np.mean(scores))
