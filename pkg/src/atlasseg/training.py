"""Mini-batch training with an adaptive-moment optimizer, plus evaluation.

Everything is seeded and deterministic: shuffling uses a dedicated
generator, batches accumulate gradients in sample order, and the optimizer
update is a fixed sequence of elementwise operations, so identical configs
produce bit-identical histories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import Atlas
from .network import (
    Architecture,
    init_params,
    loss_and_gradients,
    parameter_shapes,
    predict,
)
from .posewarp import Pose, PoseError, pose_errors
from .synth import Sample, canonical_atlas
from .topology import TopologySpec, check_topology, jaccard, ter_counts

HISTORY_COLUMNS = ("epoch", "loss", "l_seg", "l_pose", "val_jaccard", "val_ter")


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; aborts with a diagnostic."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "panet"
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    depth: int = 3
    base_channels: int = 8
    pose_hidden: int = 32
    atlas_softness: float = 0.08
    detach_warp: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning rate, batch size, and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"momentum decays must be in [0, 1), got {self.beta1}, {self.beta2}")
        from .network import VARIANTS

        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_json(self) -> dict:
        obj = {k: getattr(self, k) for k in self.__dataclass_fields__}
        obj["loss_weights"] = list(self.loss_weights)
        return obj

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "loss_weights" in obj:
            obj["loss_weights"] = tuple(obj["loss_weights"])
        return TrainConfig(**obj)


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        for name in sorted(params):
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            m_hat = self.m[name] / (1 - c.beta1**t)
            v_hat = self.v[name] / (1 - c.beta2**t)
            params[name] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    arch: Architecture
    history: list[dict]
    best_epoch: int
    optimizer_state: dict = field(repr=False, default=None)


def make_architecture(config: TrainConfig, regime: str, input_size: int) -> Architecture:
    num_classes = 2 if regime == "retina2d" else 3
    return Architecture(
        ndim=2 if regime == "retina2d" else 3,
        num_classes=num_classes,
        input_size=input_size,
        variant=config.variant,
        depth=config.depth,
        base_channels=config.base_channels,
        pose_hidden=config.pose_hidden,
    )


def training_atlas(config: TrainConfig, regime: str, size: int) -> Atlas:
    return canonical_atlas(regime, size, softness=config.atlas_softness)


def _batch_step(params, arch, batch, atlas_probs, config) -> tuple[float, float, float, dict]:
    total = seg = pose = 0.0
    acc: dict[str, np.ndarray] = {}
    for sample in batch:
        raw_true = sample.pose.to_raw() if arch.variant != "plain" else None
        a = atlas_probs if arch.uses_atlas else None
        loss, l_seg, l_pose, grads = loss_and_gradients(
            params, arch, sample.image, a, sample.labels, raw_true,
            loss_weights=config.loss_weights, detach_warp=config.detach_warp,
        )
        total += loss
        seg += l_seg
        pose += l_pose
        for name, g in grads.items():
            acc[name] = acc.get(name, 0) + g
    n = len(batch)
    for name in acc:
        acc[name] = acc[name] / n
    return total / n, seg / n, pose / n, acc


def train(
    config: TrainConfig,
    train_samples: list[Sample],
    val_samples: list[Sample],
    topo_spec: TopologySpec,
    atlas: Atlas | None = None,
) -> TrainResult:
    """Seeded mini-batch training; keeps the best-validation parameters."""
    if not train_samples:
        raise ValueError("empty training set")
    regime = train_samples[0].regime
    size = train_samples[0].image.shape[-1]
    arch = make_architecture(config, regime, size)
    if atlas is None:
        atlas = training_atlas(config, regime, size)
    atlas_probs = atlas.probs

    params = init_params(arch, seed=config.seed)
    optimizer = Adam(parameter_shapes(arch), config)
    shuffle_rng = np.random.default_rng(config.seed)

    history: list[dict] = []
    best_epoch = -1
    best_score = -np.inf
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_samples))
        epoch_loss = epoch_seg = epoch_pose = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            try:
                loss, l_seg, l_pose, grads = _batch_step(params, arch, batch, atlas_probs, config)
            except PoseError as exc:
                # A predicted log-scale large enough to over/underflow exp()
                # is runaway optimization, not a caller error.
                raise TrainingDiverged(
                    f"pose prediction left the valid range at epoch {epoch}: {exc}"
                ) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {n_batches}"
                )
            optimizer.step(params, grads)
            epoch_loss += loss
            epoch_seg += l_seg
            epoch_pose += l_pose
            n_batches += 1

        if val_samples:
            report = evaluate(params, arch, val_samples, atlas, topo_spec)
            val_jaccard = report["jaccard_mean"]
            k, n = report["ter"]
            val_ter = k / n
        else:
            val_jaccard, val_ter = 0.0, 0.0
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / n_batches,
                "l_seg": epoch_seg / n_batches,
                "l_pose": epoch_pose / n_batches,
                "val_jaccard": val_jaccard,
                "val_ter": val_ter,
            }
        )
        score = val_jaccard - val_ter  # favor clean topology on ties
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    return TrainResult(
        params=best_params,
        arch=arch,
        history=history,
        best_epoch=best_epoch,
        optimizer_state=optimizer.state(),
    )


def overfit_single(
    config: TrainConfig, sample: Sample, steps: int, atlas: Atlas | None = None
) -> list[float]:
    """Repeated full-gradient steps on one sample; returns the loss trace."""
    arch = make_architecture(config, sample.regime, sample.image.shape[-1])
    if atlas is None:
        atlas = training_atlas(config, sample.regime, sample.image.shape[-1])
    params = init_params(arch, seed=config.seed)
    optimizer = Adam(parameter_shapes(arch), config)
    losses = []
    for step in range(steps):
        loss, _, _, grads = _batch_step(params, arch, [sample], atlas.probs, config)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        optimizer.step(params, grads)
        losses.append(loss)
    return losses


def evaluate(
    params: dict[str, np.ndarray],
    arch: Architecture,
    samples: list[Sample],
    atlas: Atlas | None,
    topo_spec: TopologySpec,
) -> dict:
    """Per-class Jaccard (%), mean, TER counts, and pose error means."""
    if not samples:
        raise ValueError("empty evaluation set")
    num_classes = arch.num_classes
    per_class = np.zeros(num_classes)
    violation_lists = []
    orient_errors = []
    loc_errors = []
    grid_size = samples[0].image.shape[-1]
    for sample in samples:
        a = atlas.probs if (arch.uses_atlas and atlas is not None) else None
        labels, pose_raw = predict(params, arch, sample.image, a)
        for k in range(num_classes):
            per_class[k] += jaccard(labels, sample.labels, k + 1)
        violation_lists.append(check_topology(labels, topo_spec))
        if arch.variant != "plain":
            pose_pred = Pose.from_raw(pose_raw, arch.ndim)
            orient, loc = pose_errors(pose_pred, sample.pose, grid_size)
            orient_errors.append(orient)
            loc_errors.append(loc)
    per_class = per_class / len(samples) * 100.0
    report = {
        "classes": list(topo_spec.classes),
        "jaccard_percent": [float(v) for v in per_class],
        "jaccard_mean": float(per_class.mean()),
        "ter": ter_counts(violation_lists),
        "orientation_error_deg": float(np.mean(orient_errors)) if orient_errors else None,
        "localization_error_px": float(np.mean(loc_errors)) if loc_errors else None,
    }
    return report


def metrics_from_predictions(
    predictions: list[np.ndarray],
    truths: list[np.ndarray],
    topo_spec: TopologySpec,
    pose_pairs: list[tuple[Pose, Pose]] | None = None,
    grid_size: int | None = None,
) -> dict:
    """Same report as evaluate(), from precomputed label grids."""
    if not predictions or len(predictions) != len(truths):
        raise ValueError("predictions and truths must be non-empty and aligned")
    num_classes = len(topo_spec.classes)
    per_class = np.zeros(num_classes)
    violation_lists = []
    for pred, truth in zip(predictions, truths):
        for k in range(num_classes):
            per_class[k] += jaccard(pred, truth, k + 1)
        violation_lists.append(check_topology(pred, topo_spec))
    per_class = per_class / len(predictions) * 100.0
    orient = loc = None
    if pose_pairs:
        errs = [pose_errors(p, t, grid_size) for p, t in pose_pairs]
        orient = float(np.mean([e[0] for e in errs]))
        loc = float(np.mean([e[1] for e in errs]))
    return {
        "classes": list(topo_spec.classes),
        "jaccard_percent": [float(v) for v in per_class],
        "jaccard_mean": float(per_class.mean()),
        "ter": ter_counts(violation_lists),
        "orientation_error_deg": orient,
        "localization_error_px": loc,
    }


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row[k]) for k in HISTORY_COLUMNS})


def write_report(path: str | Path, report: dict) -> None:
    """Metrics report as CSV: one row per class plus summary columns."""
    k, n = report["ter"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "jaccard_percent"])
        for name, val in zip(report["classes"], report["jaccard_percent"]):
            writer.writerow([name, _fmt(val)])
        writer.writerow(["mean", _fmt(report["jaccard_mean"])])
        writer.writerow(["ter", f"{k}/{n}"])
        if report.get("orientation_error_deg") is not None:
            writer.writerow(["orientation_error_deg", _fmt(report["orientation_error_deg"])])
        if report.get("localization_error_px") is not None:
            writer.writerow(["localization_error_px", _fmt(report["localization_error_px"])])


def format_report(report: dict) -> str:
    """Human-readable table: per-class Jaccard %, mean, TER as k/N."""
    lines = []
    width = max(len(c) for c in report["classes"] + ["class"])
    lines.append(f"{'class'.ljust(width)}  jaccard%")
    for name, val in zip(report["classes"], report["jaccard_percent"]):
        lines.append(f"{name.ljust(width)}  {val:8.2f}")
    lines.append(f"{'mean'.ljust(width)}  {report['jaccard_mean']:8.2f}")
    k, n = report["ter"]
    lines.append(f"TER: {k}/{n}")
    if report.get("orientation_error_deg") is not None:
        lines.append(f"mean orientation error: {report['orientation_error_deg']:.2f} deg")
    if report.get("localization_error_px") is not None:
        lines.append(f"mean localization error: {report['localization_error_px']:.2f} px")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)
