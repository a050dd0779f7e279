"""Encoder-decoder segmentation network with a jointly trained pose head.

Three variants share one parameter/IO scheme:

* ``plain``  -- encoder-decoder only; no pose head, no atlas injection.
* ``panet``  -- the pose head reads the shared encoder's latent vector,
  predicts an affine pose, the atlas is warped by that pose, rescaled, and
  concatenated with the decoder features at every scale.  Segmentation
  gradient flows back into the pose through the warp, so both tasks shape
  the same features.
* ``naive``  -- same atlas injection, but the pose head hangs off a second,
  independent encoder and the warp is detached: the segmentation loss never
  reaches the pose parameters and the pose loss never reaches the primary
  encoder.

The composite training loss is  L = w_seg * cross_entropy + w_pose * mse(pose),
with the pose regressed in raw space (log-scales), so the network output is
unconstrained while scales stay positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ops import (
    AvgPool2,
    Conv,
    ConcatChannels,
    Flatten,
    Linear,
    NearestUpsample2,
    ReLU,
    ShapeError,
    softmax_cross_entropy,
)
from .posewarp import Pose, pose_dim, pose_loss, warp, warp_backward

VARIANTS = ("plain", "panet", "naive")


@dataclass(frozen=True)
class Architecture:
    """Fully determines every parameter shape (lossless round-trip)."""

    ndim: int
    num_classes: int  # structure classes; logits carry num_classes + 1 channels
    input_size: int = 32  # spatial side length (square/cubic inputs)
    variant: str = "panet"
    depth: int = 3
    base_channels: int = 8
    pose_hidden: int = 32
    in_channels: int = 1

    def __post_init__(self) -> None:
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 2 or self.base_channels < 1 or self.num_classes < 1:
            raise ValueError("depth >= 2, base_channels >= 1, num_classes >= 1 required")
        # The pose head pools the deepest features once more before its
        # fully connected layers, hence the extra factor of two.
        if self.input_size % (1 << self.depth):
            raise ValueError(
                f"input size {self.input_size} not divisible by 2^{self.depth}"
            )

    def channels(self, level: int) -> int:
        return self.base_channels << level

    @property
    def pose_dim(self) -> int:
        return pose_dim(self.ndim)

    @property
    def uses_atlas(self) -> bool:
        return self.variant in ("panet", "naive")

    def to_json(self) -> dict:
        return {
            "ndim": self.ndim,
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "variant": self.variant,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "pose_hidden": self.pose_hidden,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_json(obj: dict) -> "Architecture":
        return Architecture(**obj)


def _conv_shape(arch: Architecture, in_c: int, out_c: int, k: int) -> tuple[int, ...]:
    return (out_c, in_c) + (k,) * arch.ndim


def parameter_shapes(arch: Architecture) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable parameter of the variant."""
    shapes: dict[str, tuple[int, ...]] = {}
    k_atlas = arch.num_classes if arch.uses_atlas else 0
    d = arch.depth

    def add_encoder(prefix: str) -> None:
        for i in range(d):
            in_c = arch.in_channels if i == 0 else arch.channels(i - 1)
            shapes[f"{prefix}{i}.w"] = _conv_shape(arch, in_c, arch.channels(i), 3)
            shapes[f"{prefix}{i}.b"] = (arch.channels(i),)

    add_encoder("enc")
    if arch.variant == "naive":
        add_encoder("posenc")

    if arch.variant in ("panet", "naive"):
        deep_spatial = (arch.input_size >> d) ** arch.ndim
        deep = arch.channels(d - 1) * deep_spatial
        shapes["pose.fc1.w"] = (arch.pose_hidden, deep)
        shapes["pose.fc1.b"] = (arch.pose_hidden,)
        shapes["pose.fc2.w"] = (arch.pose_dim, arch.pose_hidden)
        shapes["pose.fc2.b"] = (arch.pose_dim,)

    shapes["bott.w"] = _conv_shape(arch, arch.channels(d - 1) + k_atlas, arch.channels(d - 1), 3)
    shapes["bott.b"] = (arch.channels(d - 1),)
    for i in range(d - 2, -1, -1):
        in_c = arch.channels(i + 1) + arch.channels(i) + k_atlas
        shapes[f"dec{i}.w"] = _conv_shape(arch, in_c, arch.channels(i), 3)
        shapes[f"dec{i}.b"] = (arch.channels(i),)
    shapes["out.w"] = _conv_shape(arch, arch.channels(0), arch.num_classes + 1, 1)
    shapes["out.b"] = (arch.num_classes + 1,)
    return shapes


def init_params(arch: Architecture, seed: int = 0) -> dict[str, np.ndarray]:
    """He-style init; the final pose layer starts near zero so the first
    predicted pose is close to identity (stable warps from step one)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        elif name == "pose.fc2.w":
            params[name] = rng.normal(0.0, 1e-3, size=shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


class ForwardResult:
    """Forward outputs plus the op tape needed for the backward pass."""

    def __init__(self, logits: np.ndarray, pose_raw: np.ndarray, tape: dict):
        self.logits = logits
        self.pose_raw = pose_raw
        self.tape = tape


def _run_encoder(params, arch, prefix, x):
    acts, conv_ops, relu_ops, pool_ops = [], [], [], []
    h = x
    for i in range(arch.depth):
        conv = Conv(stride=1, padding=1)
        relu = ReLU()
        h = relu.forward(conv.forward(h, params[f"{prefix}{i}.w"], params[f"{prefix}{i}.b"]))
        acts.append(h)
        conv_ops.append(conv)
        relu_ops.append(relu)
        if i < arch.depth - 1:
            pool = AvgPool2()
            h = pool.forward(h)
            pool_ops.append(pool)
    return {"acts": acts, "conv": conv_ops, "relu": relu_ops, "pool": pool_ops}


def _encoder_backward(params, arch, prefix, enc_tape, act_grads, grads):
    g_skip = None
    for i in range(arch.depth - 1, -1, -1):
        g = act_grads[i]
        if g_skip is not None:
            g = g + g_skip
        (g,) = enc_tape["relu"][i].backward(g)
        g_in, gw, gb = enc_tape["conv"][i].backward(g)
        grads[f"{prefix}{i}.w"] = grads.get(f"{prefix}{i}.w", 0) + gw
        grads[f"{prefix}{i}.b"] = grads.get(f"{prefix}{i}.b", 0) + gb
        g_skip = enc_tape["pool"][i - 1].backward(g_in)[0] if i > 0 else None
    return g_skip


def forward(
    params: dict[str, np.ndarray],
    arch: Architecture,
    x: np.ndarray,
    atlas_probs: np.ndarray | None,
    warp_pose_raw: np.ndarray | None = None,
) -> ForwardResult:
    """Single-sample forward pass; x is (in_channels, *spatial).

    ``warp_pose_raw`` overrides the pose used for the atlas warp (the pose
    head still reports its own prediction); finite-difference checks of
    detached variants use it to freeze the warp.
    """
    d = arch.depth
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != arch.ndim + 1 or x.shape[0] != arch.in_channels:
        raise ShapeError(f"input shape {x.shape} incompatible with architecture")
    if x.shape[1:] != (arch.input_size,) * arch.ndim:
        raise ShapeError(
            f"spatial size {x.shape[1:]} != expected {(arch.input_size,) * arch.ndim}"
        )
    if arch.uses_atlas:
        if atlas_probs is None:
            raise ShapeError(f"variant {arch.variant!r} requires an atlas")
        atlas_probs = np.asarray(atlas_probs, dtype=np.float64)
        if atlas_probs.shape != (arch.num_classes,) + x.shape[1:]:
            raise ShapeError(
                f"atlas shape {atlas_probs.shape} != ({arch.num_classes}, {x.shape[1:]})"
            )

    tape: dict = {}
    enc = _run_encoder(params, arch, "enc", x)
    tape["enc"] = enc

    if arch.variant == "plain":
        pose_raw = np.zeros(arch.pose_dim)
    else:
        if arch.variant == "naive":
            tape["posenc"] = _run_encoder(params, arch, "posenc", x)
            deep_feat = tape["posenc"]["acts"][d - 1]
        else:
            deep_feat = enc["acts"][d - 1]
        # A coarse pooled latent keeps the head small: pose regression has to
        # read structure from the encoder features instead of memorizing.
        pool = AvgPool2()
        flat = Flatten()
        latent = flat.forward(pool.forward(deep_feat))
        fc1, fc_relu, fc2 = Linear(), ReLU(), Linear()
        h1 = fc_relu.forward(fc1.forward(latent, params["pose.fc1.w"], params["pose.fc1.b"]))
        pose_raw = fc2.forward(h1, params["pose.fc2.w"], params["pose.fc2.b"])
        tape["pose_head"] = {"pool": pool, "flat": flat, "fc1": fc1, "fc_relu": fc_relu, "fc2": fc2}

    atlas_scales: list[np.ndarray] = []
    if arch.uses_atlas:
        pose = Pose.from_raw(pose_raw if warp_pose_raw is None else warp_pose_raw, arch.ndim)
        warped, wcache = warp(atlas_probs, pose)
        tape["warp_cache"] = wcache
        tape["pose"] = pose
        atlas_scales = [warped]
        atlas_pools = []
        for _ in range(d - 1):
            pool = AvgPool2()
            atlas_scales.append(pool.forward(atlas_scales[-1]))
            atlas_pools.append(pool)
        tape["atlas_pools"] = atlas_pools

    # Decoder: bottleneck at the deepest scale, then up through the levels.
    cat_b = ConcatChannels()
    bott_in = (
        cat_b.forward(enc["acts"][d - 1], atlas_scales[d - 1])
        if arch.uses_atlas
        else cat_b.forward(enc["acts"][d - 1])
    )
    conv_b, relu_b = Conv(stride=1, padding=1), ReLU()
    state = relu_b.forward(conv_b.forward(bott_in, params["bott.w"], params["bott.b"]))
    tape["bott"] = {"cat": cat_b, "conv": conv_b, "relu": relu_b}

    dec_tape = []
    for i in range(d - 2, -1, -1):
        ups = NearestUpsample2()
        cat = ConcatChannels()
        upsampled = ups.forward(state)
        if arch.uses_atlas:
            din = cat.forward(upsampled, enc["acts"][i], atlas_scales[i])
        else:
            din = cat.forward(upsampled, enc["acts"][i])
        conv, relu = Conv(stride=1, padding=1), ReLU()
        state = relu.forward(conv.forward(din, params[f"dec{i}.w"], params[f"dec{i}.b"]))
        dec_tape.append({"level": i, "ups": ups, "cat": cat, "conv": conv, "relu": relu})
    tape["dec"] = dec_tape

    conv_out = Conv(stride=1, padding=0)
    logits = conv_out.forward(state, params["out.w"], params["out.b"])
    tape["out"] = conv_out
    return ForwardResult(logits, pose_raw, tape)


def loss_and_gradients(
    params: dict[str, np.ndarray],
    arch: Architecture,
    x: np.ndarray,
    atlas_probs: np.ndarray | None,
    y_true: np.ndarray,
    pose_raw_true: np.ndarray | None,
    loss_weights: tuple[float, float] = (1.0, 1.0),
    detach_warp: bool = False,
) -> tuple[float, float, float, dict[str, np.ndarray]]:
    """Composite loss and gradients for every parameter.

    Returns (total, seg, pose, grads).  ``detach_warp`` cuts the segmentation
    gradient into the pose; the naive variant is always detached.
    """
    res = forward(params, arch, x, atlas_probs)
    d = arch.depth
    w_seg, w_pose = loss_weights
    detach = detach_warp or arch.variant == "naive"

    loss_seg, g_logits = softmax_cross_entropy(res.logits, np.asarray(y_true))
    if arch.variant == "plain":
        loss_pose, g_pose_raw = 0.0, None
    else:
        if pose_raw_true is None:
            raise ShapeError("variants with a pose head need a ground-truth pose")
        loss_pose, g_pose_raw = pose_loss(res.pose_raw, np.asarray(pose_raw_true))
    total = w_seg * loss_seg + w_pose * loss_pose

    grads: dict[str, np.ndarray] = {}
    tape = res.tape

    g_state, gw, gb = tape["out"].backward(w_seg * g_logits)
    grads["out.w"], grads["out.b"] = gw, gb

    enc_act_grads = [np.zeros_like(a) for a in tape["enc"]["acts"]]
    atlas_grads = [None] * d

    for entry in reversed(tape["dec"]):
        i = entry["level"]
        (g_state,) = entry["relu"].backward(g_state)
        g_din, gw, gb = entry["conv"].backward(g_state)
        grads[f"dec{i}.w"], grads[f"dec{i}.b"] = gw, gb
        parts = entry["cat"].backward(g_din)
        enc_act_grads[i] += parts[1]
        if arch.uses_atlas:
            atlas_grads[i] = parts[2]
        (g_state,) = entry["ups"].backward(parts[0])

    (g_state,) = tape["bott"]["relu"].backward(g_state)
    g_bin, gw, gb = tape["bott"]["conv"].backward(g_state)
    grads["bott.w"], grads["bott.b"] = gw, gb
    parts = tape["bott"]["cat"].backward(g_bin)
    enc_act_grads[d - 1] += parts[0]
    if arch.uses_atlas:
        atlas_grads[d - 1] = parts[1]

    g_u = None  # gradient w.r.t. the raw pose vector
    if arch.variant != "plain":
        g_u = w_pose * g_pose_raw
        if arch.uses_atlas and not detach:
            acc = atlas_grads[d - 1]
            for i in range(d - 2, -1, -1):
                acc = atlas_grads[i] + tape["atlas_pools"][i].backward(acc)[0]
            grad_q = warp_backward(acc, tape["warp_cache"])  # (t, s, r) space
            nd = arch.ndim
            scale = np.array(tape["pose"].scale)
            grad_q_raw = grad_q.copy()
            grad_q_raw[nd : 2 * nd] *= scale  # chain through exp
            g_u = g_u + grad_q_raw

        head = tape["pose_head"]
        g_h1, gw, gb = head["fc2"].backward(g_u)
        grads["pose.fc2.w"], grads["pose.fc2.b"] = gw, gb
        (g_h1,) = head["fc_relu"].backward(g_h1)
        g_latent, gw, gb = head["fc1"].backward(g_h1)
        grads["pose.fc1.w"], grads["pose.fc1.b"] = gw, gb
        (g_deep,) = head["flat"].backward(g_latent)
        (g_deep,) = head["pool"].backward(g_deep)
        if arch.variant == "naive":
            pose_act_grads = [np.zeros_like(a) for a in tape["posenc"]["acts"]]
            pose_act_grads[d - 1] += g_deep
            _encoder_backward(params, arch, "posenc", tape["posenc"], pose_act_grads, grads)
        else:
            enc_act_grads[d - 1] += g_deep

    _encoder_backward(params, arch, "enc", tape["enc"], enc_act_grads, grads)

    for name in parameter_shapes(arch):
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return total, loss_seg, loss_pose, grads


def predict(
    params: dict[str, np.ndarray],
    arch: Architecture,
    x: np.ndarray,
    atlas_probs: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Hard labels (argmax over logits; ties to the lower class index) + raw pose."""
    res = forward(params, arch, x, atlas_probs)
    return np.argmax(res.logits, axis=0).astype(np.int64), res.pose_raw


def save_checkpoint(path: str | Path, arch: Architecture, params: dict[str, np.ndarray],
                    optimizer_state: dict | None = None) -> None:
    """Checkpoint directory: arch.json + one TGRID per parameter (+ optimizer)."""
    from .tensorio import save_tgrid

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "arch.json").write_text(json.dumps(arch.to_json(), indent=2) + "\n")
    for name, value in sorted(params.items()):
        save_tgrid(path / f"{name}.tgrid", value)
    if optimizer_state is not None:
        opt_dir = path / "optimizer"
        opt_dir.mkdir(exist_ok=True)
        (opt_dir / "state.json").write_text(
            json.dumps({"step": optimizer_state["step"]}) + "\n"
        )
        for kind in ("m", "v"):
            for name, value in sorted(optimizer_state[kind].items()):
                save_tgrid(opt_dir / f"{kind}.{name}.tgrid", value)


def load_checkpoint(path: str | Path) -> tuple[Architecture, dict[str, np.ndarray], dict | None]:
    from .tensorio import load_tgrid

    path = Path(path)
    arch = Architecture.from_json(json.loads((path / "arch.json").read_text()))
    params = {
        name: load_tgrid(path / f"{name}.tgrid") for name in parameter_shapes(arch)
    }
    optimizer_state = None
    opt_dir = path / "optimizer"
    if opt_dir.exists():
        optimizer_state = {
            "step": json.loads((opt_dir / "state.json").read_text())["step"],
            "m": {name: load_tgrid(opt_dir / f"m.{name}.tgrid") for name in params},
            "v": {name: load_tgrid(opt_dir / f"v.{name}.tgrid") for name in params},
        }
    return arch, params, optimizer_state


def model_gradient_check(
    params: dict[str, np.ndarray],
    arch: Architecture,
    x: np.ndarray,
    atlas_probs: np.ndarray | None,
    y_true: np.ndarray,
    pose_raw_true: np.ndarray | None,
    h: float = 1e-5,
    max_coords_per_param: int = 24,
    seed: int = 0,
) -> float:
    """Central finite differences of the total loss against analytic grads.

    Subsamples coordinates per parameter with a seeded generator; returns the
    max relative error (relative to max(|analytic|, |numeric|, 1)).
    """
    rng = np.random.default_rng(seed)
    _, _, _, grads = loss_and_gradients(params, arch, x, atlas_probs, y_true, pose_raw_true)

    # Detached variants cut the segmentation->warp->pose path on purpose, so
    # the finite-difference probe must hold the warp pose fixed to measure
    # the same (stop-gradient) derivative the backward pass computes.
    frozen_pose = None
    if arch.variant == "naive" and arch.uses_atlas:
        frozen_pose = forward(params, arch, x, atlas_probs).pose_raw

    def loss_of(p: dict[str, np.ndarray]) -> float:
        res = forward(p, arch, x, atlas_probs, warp_pose_raw=frozen_pose)
        loss_seg, _ = softmax_cross_entropy(res.logits, np.asarray(y_true))
        if arch.variant == "plain":
            return loss_seg
        lp, _ = pose_loss(res.pose_raw, np.asarray(pose_raw_true))
        return loss_seg + lp

    max_err = 0.0
    for name in sorted(grads):
        flat = params[name].reshape(-1)
        n = flat.size
        coords = (
            np.arange(n)
            if n <= max_coords_per_param
            else rng.choice(n, size=max_coords_per_param, replace=False)
        )
        g_flat = grads[name].reshape(-1)
        for i in coords:
            trial = {k: v.copy() for k, v in params.items()}
            trial[name].reshape(-1)[i] += h
            plus = loss_of(trial)
            trial[name].reshape(-1)[i] -= 2 * h
            minus = loss_of(trial)
            numeric = (plus - minus) / (2 * h)
            denom = max(abs(g_flat[i]), abs(numeric), 1.0)
            max_err = max(max_err, abs(g_flat[i] - numeric) / denom)
    return max_err
