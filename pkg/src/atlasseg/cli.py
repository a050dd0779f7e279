"""Command-line operator surface.

Subcommands: gen-data, train, eval, metrics, warp, gradcheck.  Experiments
are driven by a JSON config with an explicit schema version; unknown keys
are rejected with the offending field path.  Every run is seeded and writes
the fully resolved config next to its outputs, so identical configs produce
byte-identical CSVs.

Exit codes: 0 ok, 2 malformed config/usage, 3 numeric divergence, 1 other
errors.  ATLASSEG_OUT_ROOT, when set, prefixes relative output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import Atlas, export_previews, load_atlas, save_atlas
from .network import Architecture, init_params, load_checkpoint, save_checkpoint
from .ops import AvgPool2, Conv, ConcatChannels, GlobalAvgPool, Linear, NearestUpsample2, ReLU, check_gradient
from .network import model_gradient_check
from .posewarp import Pose, load_pose, warp, warp_backward
from .synth import SceneParams, generate, load_dataset, save_dataset, split
from .topology import load_spec
from .training import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    format_report,
    metrics_from_predictions,
    train,
    training_atlas,
    write_history_csv,
    write_report,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    """Malformed experiment config; message carries the field path."""


_TOP_KEYS = {
    "schema_version",
    "regime",
    "seed",
    "output_dir",
    "scene",
    "dataset",
    "train",
    "topology",
}
_DATASET_KEYS = {"n_train", "n_val", "n_test"}


def _reject_unknown(obj: dict, allowed: set[str], path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')}")
    if "seed" not in raw:
        raise ConfigError("seed is mandatory")
    if "regime" not in raw:
        raise ConfigError("regime is mandatory")

    scene_keys = set(SceneParams.__dataclass_fields__) - {"regime", "seed"}
    _reject_unknown(raw.get("scene", {}), scene_keys, "scene")
    _reject_unknown(raw.get("dataset", {}), _DATASET_KEYS, "dataset")
    train_keys = set(TrainConfig.__dataclass_fields__) - {"seed"}
    _reject_unknown(raw.get("train", {}), train_keys, "train")

    config = {
        "schema_version": SCHEMA_VERSION,
        "regime": raw["regime"],
        "seed": int(raw["seed"]),
        "output_dir": raw.get("output_dir", "runs"),
        "scene": dict(raw.get("scene", {})),
        "dataset": {"n_train": 64, "n_val": 16, "n_test": 32, **raw.get("dataset", {})},
        "train": dict(raw.get("train", {})),
        "topology": raw.get("topology", "retina" if raw["regime"] == "retina2d" else "synapse"),
    }
    try:
        _scene_params(config)
        _train_config(config)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _scene_params(config: dict) -> SceneParams:
    return SceneParams(regime=config["regime"], seed=config["seed"], **config["scene"])


def _train_config(config: dict, variant: str | None = None) -> TrainConfig:
    fields = dict(config["train"])
    if variant is not None:
        fields["variant"] = variant
    if "loss_weights" in fields:
        fields["loss_weights"] = tuple(fields["loss_weights"])
    return TrainConfig(seed=config["seed"], **fields)


def _resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get("ATLASSEG_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_resolved_config(out: Path, config: dict, extra: dict | None = None) -> None:
    resolved = dict(config)
    if extra:
        resolved.update(extra)
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n"
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = _resolve_out(args.out or Path(config["output_dir"]) / "dataset")
    params = _scene_params(config)
    counts = config["dataset"]
    total = counts["n_train"] + counts["n_val"] + counts["n_test"]
    samples = generate(params, total)
    fractions = tuple(counts[k] / total for k in ("n_train", "n_val", "n_test"))
    parts = split(samples, fractions, seed=config["seed"])
    for name, part in zip(("train", "val", "test"), parts):
        if not part:
            raise ConfigError(f"dataset.{name} split is empty")
        save_dataset(out / name, part, params)
    _write_resolved_config(out, config)
    print(f"wrote {total} samples under {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    tc = _train_config(config, variant=args.variant)
    out = _resolve_out(args.out or Path(config["output_dir"]) / f"train_{tc.variant}")
    data_dir = Path(args.data)
    train_samples, _ = load_dataset(data_dir / "train")
    val_samples, _ = load_dataset(data_dir / "val")
    spec = load_spec(config["topology"])
    atlas = training_atlas(tc, config["regime"], train_samples[0].image.shape[-1])
    result = train(tc, train_samples, val_samples, spec, atlas=atlas)
    save_checkpoint(out / "checkpoint", result.arch, result.params, result.optimizer_state)
    write_history_csv(out / "history.csv", result.history)
    _write_resolved_config(out, config, {"variant": tc.variant, "best_epoch": result.best_epoch})
    print(f"trained {tc.variant} for {tc.epochs} epochs; best epoch {result.best_epoch}")
    print(f"history: {out / 'history.csv'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    arch, params, _ = load_checkpoint(Path(args.checkpoint))
    out = _resolve_out(args.out or Path(config["output_dir"]) / "eval")
    samples, _ = load_dataset(Path(args.data) / "test" if (Path(args.data) / "test").exists() else Path(args.data))
    spec = load_spec(config["topology"])
    tc = _train_config(config, variant=arch.variant)
    atlas = training_atlas(tc, config["regime"], samples[0].image.shape[-1])
    report = evaluate(params, arch, samples, atlas, spec)
    write_report(out / "metrics.csv", report)
    table = format_report(report)
    (out / "metrics.txt").write_text(table)
    _write_resolved_config(out, config, {"variant": arch.variant})
    print(table, end="")
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    samples, _ = load_dataset(Path(args.data))
    spec = load_spec(args.topology)
    from .tensorio import load_tgrid

    preds = []
    for i in range(len(samples)):
        pred_path = Path(args.pred) / f"labels_{i:04d}.tgrid"
        if not pred_path.exists():
            raise ConfigError(f"missing prediction file {pred_path}")
        preds.append(load_tgrid(pred_path).astype(np.int64))
    report = metrics_from_predictions(preds, [s.labels for s in samples], spec)
    out = _resolve_out(args.out)
    write_report(out / "metrics.csv", report)
    table = format_report(report)
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_warp(args: argparse.Namespace) -> int:
    atlas = load_atlas(args.atlas)
    pose = load_pose(args.pose)
    warped_probs, _ = warp(atlas.probs, pose)
    warped = Atlas(atlas.class_names, np.clip(warped_probs, 0.0, 1.0), dict(atlas.builder_params))
    out = _resolve_out(args.out)
    save_atlas(out / "warped", warped)
    export_previews(out / "previews", warped)
    print(f"warped atlas written to {out}")
    return EXIT_OK


def _gradcheck_rows() -> list[tuple[str, float, float]]:
    """(name, max relative error, tolerance) for every primitive, the warp's
    pose gradients, and the full tiny model."""
    rng = np.random.default_rng(11)
    rows = []

    x2 = rng.standard_normal((2, 6, 6))
    k2 = rng.standard_normal((3, 2, 3, 3))
    b2 = rng.standard_normal(3)
    rows.append(("conv2d/input", check_gradient(Conv(1, 1), [x2, k2, b2], arg_index=0), 1e-6))
    rows.append(("conv2d/kernel", check_gradient(Conv(1, 1), [x2, k2, b2], arg_index=1), 1e-6))
    rows.append(("conv2d/bias", check_gradient(Conv(1, 1), [x2, k2, b2], arg_index=2), 1e-6))
    x3 = rng.standard_normal((2, 4, 4, 4))
    k3 = rng.standard_normal((2, 2, 3, 3, 3))
    rows.append(("conv3d/input", check_gradient(Conv(1, 1), [x3, k3, rng.standard_normal(2)]), 1e-6))
    rows.append(("avgpool2", check_gradient(AvgPool2(), [rng.standard_normal((3, 8, 8))]), 1e-6))
    rows.append(("upsample2", check_gradient(NearestUpsample2(), [rng.standard_normal((3, 5, 5))]), 1e-6))
    relu_in = rng.standard_normal((4, 7, 7))
    relu_in[np.abs(relu_in) < 1e-3] = 0.5  # keep inputs away from the kink
    rows.append(("relu", check_gradient(ReLU(), [relu_in]), 1e-6))
    rows.append(
        ("linear", check_gradient(Linear(), [rng.standard_normal(6), rng.standard_normal((4, 6)), rng.standard_normal(4)], arg_index=1), 1e-6)
    )
    rows.append(
        ("concat", check_gradient(ConcatChannels(), [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 5, 5))], arg_index=1), 1e-6)
    )
    rows.append(("global_avg_pool", check_gradient(GlobalAvgPool(), [rng.standard_normal((3, 6, 6))]), 1e-6))

    from .synth import canonical_atlas

    for regime, raw in (
        ("retina2d", np.array([0.08, -0.05, 0.07, -0.04, 0.25])),
        ("synapse3d", np.array([0.05, -0.06, 0.04, 0.03, -0.05, 0.06, 0.2, -0.15, 0.1])),
    ):
        atlas = canonical_atlas(regime, 16, softness=0.1)
        ndim = atlas.ndim
        pose = Pose.from_raw(raw, ndim)
        up = np.random.default_rng(5).standard_normal(atlas.probs.shape)
        _, cache = warp(atlas.probs, pose)
        analytic = warp_backward(up, cache)
        h = 1e-6
        vec = pose.to_vector()
        err = 0.0
        for i in range(vec.size):
            vp, vm = vec.copy(), vec.copy()
            vp[i] += h
            vm[i] -= h
            wp, _ = warp(atlas.probs, Pose.from_vector(vp, ndim))
            wm, _ = warp(atlas.probs, Pose.from_vector(vm, ndim))
            numeric = float(np.sum(up * (wp - wm)) / (2 * h))
            denom = max(abs(analytic[i]), abs(numeric), 1.0)
            err = max(err, abs(analytic[i] - numeric) / denom)
        rows.append((f"warp_pose/{regime}", err, 1e-5))

    for variant in ("plain", "panet", "naive"):
        arch = Architecture(ndim=2, num_classes=2, input_size=8, variant=variant,
                            depth=2, base_channels=2, pose_hidden=8)
        params = init_params(arch, seed=3)
        gen = np.random.default_rng(7)
        x = gen.standard_normal((1, 8, 8))
        atlas = canonical_atlas("retina2d", 8, softness=0.12)
        y = gen.integers(0, 3, size=(8, 8))
        q_raw = np.array([0.05, -0.04, 0.03, 0.02, 0.1])
        err = model_gradient_check(params, arch, x, atlas.probs, y, q_raw, h=1e-5, seed=1)
        rows.append((f"model/{variant}", err, 1e-4))
    return rows


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = _gradcheck_rows()
    width = max(len(name) for name, _, _ in rows)
    failed = 0
    for name, err, tol in rows:
        ok = err < tol
        failed += 0 if ok else 1
        print(f"{name.ljust(width)}  {err:12.3e}  (tol {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return EXIT_OK if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlasseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic benchmark dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("plain", "panet", "naive"), default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="score precomputed label predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--topology", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("warp", help="warp an atlas by a pose and export previews")
    p.add_argument("--atlas", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
