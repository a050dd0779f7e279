"""Synthetic benchmark: image / label / pose triples with known ground truth.

Each sample draws a pose from configured ranges, warps the hard canonical
atlas of its regime to produce the label grid, and renders an intensity
image: one mean intensity per class, optional background distractor blobs
with structure-like intensities, then Gaussian noise.  Distractors never
touch the label grid, so ground truth stays topologically clean by
construction.

Per-sample seeds derive from (master seed, index), so the output does not
depend on generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .atlas import Atlas, build_disc_cup_atlas, build_synapse_atlas
from .posewarp import Pose, load_pose, save_pose, warp
from .tensorio import load_tgrid, save_tgrid

REGIMES = ("retina2d", "synapse3d")

DEFAULT_INTENSITIES = {
    "retina2d": {"background": 0.1, "disc": 0.45, "cup": 0.8},
    "synapse3d": {"background": 0.1, "pre": 0.35, "cleft": 0.85, "post": 0.6},
}

DEFAULT_SIZES = {"retina2d": 32, "synapse3d": 16}

# Canonical hard-atlas geometry shared by the generator and the trainer.
ATLAS_GEOMETRY = {
    "retina2d": {"disc_radius": 0.35, "cup_radius": 0.15},
    "synapse3d": {"cleft_halfwidth": 0.1},
}


class GenerationError(ValueError):
    """Scene parameters that cannot produce a valid sample."""


@dataclass(frozen=True)
class SceneParams:
    regime: str = "retina2d"
    size: int = 0  # 0 = regime default
    translation_range: float = 0.25
    log_scale_range: float = 0.2
    rotation_range_deg: float = 0.0  # 0 = regime default (45 in 2D, 30 in 3D)
    intensities: dict = field(default_factory=dict)
    noise_sigma: float = 0.08
    distractor_count: int = 3
    distractor_scale_range: tuple[float, float] = (0.35, 0.6)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise GenerationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.translation_range < 0 or self.translation_range >= 0.9:
            raise GenerationError(
                f"translation range {self.translation_range} would push the structure off-grid"
            )
        if self.log_scale_range < 0 or self.noise_sigma < 0 or self.distractor_count < 0:
            raise GenerationError("ranges and counts must be non-negative")
        for v in self.resolved_intensities().values():
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"intensities must be in [0, 1], got {v}")

    @property
    def ndim(self) -> int:
        return 2 if self.regime == "retina2d" else 3

    def resolved_size(self) -> int:
        return self.size if self.size else DEFAULT_SIZES[self.regime]

    def resolved_rotation_deg(self) -> float:
        if self.rotation_range_deg:
            return self.rotation_range_deg
        return 45.0 if self.ndim == 2 else 30.0

    def resolved_intensities(self) -> dict[str, float]:
        merged = dict(DEFAULT_INTENSITIES[self.regime])
        merged.update(self.intensities)
        return merged

    def to_json(self) -> dict:
        return {
            "regime": self.regime,
            "size": self.size,
            "translation_range": self.translation_range,
            "log_scale_range": self.log_scale_range,
            "rotation_range_deg": self.rotation_range_deg,
            "intensities": dict(self.intensities),
            "noise_sigma": self.noise_sigma,
            "distractor_count": self.distractor_count,
            "distractor_scale_range": list(self.distractor_scale_range),
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneParams":
        obj = dict(obj)
        if "distractor_scale_range" in obj:
            obj["distractor_scale_range"] = tuple(obj["distractor_scale_range"])
        return SceneParams(**obj)


@dataclass
class Sample:
    image: np.ndarray  # (1, *spatial)
    labels: np.ndarray  # integer grid, 0 = background
    pose: Pose
    regime: str


def canonical_atlas(regime: str, size: int, softness: float = 0.0) -> Atlas:
    geom = ATLAS_GEOMETRY[regime]
    if regime == "retina2d":
        return build_disc_cup_atlas(size, geom["disc_radius"], geom["cup_radius"], softness)
    return build_synapse_atlas(size, geom["cleft_halfwidth"], softness)


def class_names(regime: str) -> tuple[str, ...]:
    return canonical_atlas(regime, DEFAULT_SIZES[regime]).class_names


def _draw_pose(params: SceneParams, rng: np.random.Generator) -> Pose:
    d = params.ndim
    t = rng.uniform(-params.translation_range, params.translation_range, size=d)
    s = np.exp(rng.uniform(-params.log_scale_range, params.log_scale_range, size=d))
    max_angle = np.radians(params.resolved_rotation_deg())
    if d == 2:
        r = (rng.uniform(-max_angle, max_angle),)
    else:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        r = tuple(axis * rng.uniform(0.0, max_angle))
    return Pose(tuple(t), tuple(s), tuple(r))


def _paint_distractors(
    image: np.ndarray,
    labels: np.ndarray,
    hard_atlas: Atlas,
    intensity_lut: np.ndarray,
    params: SceneParams,
    rng: np.random.Generator,
) -> None:
    """Decoy mini-structures painted on background pixels only.

    Each decoy is the canonical structure warped to a random smaller pose and
    rendered with the true class intensities, so it is locally
    indistinguishable from the real structure; only the pose prior tells
    them apart.  Labels are untouched: decoys are background by definition.
    """
    d = labels.ndim
    lo, hi = params.distractor_scale_range
    for _ in range(params.distractor_count):
        t = tuple(rng.uniform(-0.7, 0.7, size=d))
        s = tuple(np.exp(rng.uniform(np.log(lo), np.log(hi), size=d)))
        if d == 2:
            r = (rng.uniform(-np.pi, np.pi),)
        else:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            r = tuple(axis * rng.uniform(0.0, np.pi / 2))
        warped, _ = warp(hard_atlas.probs, Pose(t, s, r))
        decoy_labels = Atlas(hard_atlas.class_names, np.clip(warped, 0.0, 1.0)).argmax_labels()
        mask = (decoy_labels > 0) & (labels == 0)
        image[0][mask] = intensity_lut[decoy_labels[mask]]


def _render(params: SceneParams, pose: Pose, rng: np.random.Generator) -> Sample:
    size = params.resolved_size()
    hard = canonical_atlas(params.regime, size, softness=0.0)
    warped, _ = warp(hard.probs, pose)
    labeled = Atlas(hard.class_names, np.clip(warped, 0.0, 1.0))
    labels = labeled.argmax_labels()
    if not (labels > 0).any():
        raise GenerationError("pose pushed the structure fully outside the grid")

    intens = params.resolved_intensities()
    lut = np.array([intens["background"]] + [intens[c] for c in hard.class_names])
    image = lut[labels][None].astype(np.float64)
    _paint_distractors(image, labels, hard, lut, params, rng)
    if params.noise_sigma > 0:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    return Sample(image=image, labels=labels, pose=pose, regime=params.regime)


def generate(params: SceneParams, n: int) -> list[Sample]:
    if n < 1:
        raise GenerationError(f"need n >= 1, got {n}")
    samples = []
    for index in range(n):
        rng = np.random.default_rng((params.seed, index))
        pose = _draw_pose(params, rng)
        samples.append(_render(params, pose, rng))
    return samples


def split(samples: list, fractions: tuple[float, float, float], seed: int):
    """Seeded disjoint partition; sizes by floor, remainder to largest remainders."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise GenerationError(f"fractions must sum to 1, got {fractions}")
    n = len(samples)
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(x)) for x in raw]
    remainders = [x - s for x, s in zip(raw, sizes)]
    for _ in range(n - sum(sizes)):
        i = int(np.argmax(remainders))
        sizes[i] += 1
        remainders[i] = -1.0
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for size in sizes:
        parts.append([samples[i] for i in order[start : start + size]])
        start += size
    return tuple(parts)


def save_dataset(path: str | Path, samples: list[Sample], params: SceneParams) -> None:
    """Dataset directory: manifest.json + per-sample image/label TGRIDs + pose JSON."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "regime": params.regime,
        "scene_params": params.to_json(),
        "num_samples": len(samples),
        "classes": list(class_names(params.regime)),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for i, sample in enumerate(samples):
        save_tgrid(path / f"image_{i:04d}.tgrid", sample.image)
        save_tgrid(path / f"labels_{i:04d}.tgrid", sample.labels.astype(np.float64))
        save_pose(path / f"pose_{i:04d}.json", sample.pose)


def load_dataset(path: str | Path) -> tuple[list[Sample], SceneParams]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    params = SceneParams.from_json(manifest["scene_params"])
    samples = []
    for i in range(manifest["num_samples"]):
        image = load_tgrid(path / f"image_{i:04d}.tgrid")
        labels = load_tgrid(path / f"labels_{i:04d}.tgrid").astype(np.int64)
        pose = load_pose(path / f"pose_{i:04d}.json")
        samples.append(Sample(image=image, labels=labels, pose=pose, regime=params.regime))
    return samples, params
