"""Probabilistic atlas data model and parametric builders.

An atlas assigns each grid location a probability per semantic class;
background is implicit (1 - sum), so warping with zero fill outside the
grid automatically reads as pure background.  Atlases are built in a
canonical centered pose; all pose variation happens through warping.

Two builders cover the benchmark topologies:
  * a layered 3D cube: pre / cleft / post slabs stacked along z inside an
    ellipsoidal support,
  * a concentric 2D disc/cup: a central cup blob surrounded by a disc ring.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ops import AvgPool2
from .tensorio import load_tgrid, save_tgrid, write_pgm, write_ppm

# Support radius as a fraction of the half-extent; fixed so the structure
# keeps a background margin under the default pose ranges.
SUPPORT_RADIUS = 0.85

# 3D support is deliberately anisotropic in the transverse plane: a circular
# cross-section would make rotation about the layer normal invisible, and
# with it the orientation part of the pose unrecoverable from images.
SUPPORT_RADII_3D = (0.85, 0.85, 0.55)

PROB_TOL = 1e-9

# Hue convention for composite previews (saturation encodes probability).
CLASS_COLORS = {
    "pre": (0.0, 1.0, 0.0),
    "cleft": (1.0, 0.0, 0.0),
    "post": (0.0, 0.0, 1.0),
    "disc": (0.0, 1.0, 0.0),
    "cup": (1.0, 0.0, 0.0),
}
_FALLBACK_COLORS = [(1.0, 1.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.0, 1.0)]


class AtlasError(ValueError):
    """Invalid atlas parameters or contents."""


@dataclass
class Atlas:
    """Ordered per-class probability grids with identical spatial shape."""

    class_names: tuple[str, ...]
    probs: np.ndarray  # (K, *spatial), float64
    builder_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.class_names = tuple(self.class_names)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim - 1 not in (2, 3):
            raise AtlasError(f"atlas grids must be 2D or 3D, got shape {self.probs.shape}")
        if self.probs.shape[0] != len(self.class_names):
            raise AtlasError(
                f"{len(self.class_names)} classes but {self.probs.shape[0]} grids"
            )
        validate_probabilities(self.probs)

    @property
    def ndim(self) -> int:
        return self.probs.ndim - 1

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.probs.shape[1:]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def background(self) -> np.ndarray:
        return 1.0 - self.probs.sum(axis=0)

    def argmax_labels(self) -> np.ndarray:
        """Hard labels: 0 = background, k+1 = class k; ties go to lower index."""
        stacked = np.concatenate([self.background()[None], self.probs], axis=0)
        return np.argmax(stacked, axis=0).astype(np.int64)


def validate_probabilities(probs: np.ndarray, tol: float = PROB_TOL) -> None:
    if probs.size == 0:
        raise AtlasError("empty probability grid")
    if not np.isfinite(probs).all():
        raise AtlasError("non-finite atlas probabilities")
    if probs.min() < -tol or probs.max() > 1.0 + tol:
        raise AtlasError(
            f"probabilities outside [0, 1]: range [{probs.min():g}, {probs.max():g}]"
        )
    total = probs.sum(axis=0)
    if total.max() > 1.0 + tol:
        raise AtlasError(f"per-location class probabilities sum to {total.max():g} > 1")


def _ramp(u: np.ndarray, width: float) -> np.ndarray:
    """Linear 0->1 transition of the given width centered on u = 0.

    Width 0 degenerates to the step 1[u >= 0].
    """
    if width <= 0.0:
        return (u >= 0.0).astype(np.float64)
    return np.clip(u / width + 0.5, 0.0, 1.0)


def build_synapse_atlas(size: int, cleft_halfwidth: float, softness: float) -> Atlas:
    """Layered cube: pre below, post above, cleft band around the z center.

    ``cleft_halfwidth`` and ``softness`` are fractions of ``size``; outside a
    centered ellipsoid with half-extent radii SUPPORT_RADII_3D all class
    probabilities fall to 0.
    """
    if size < 8:
        raise AtlasError(f"size must be >= 8, got {size}")
    if not 0.0 < cleft_halfwidth < 0.5:
        raise AtlasError(f"cleft_halfwidth must be in (0, 0.5), got {cleft_halfwidth}")
    if softness < 0.0:
        raise AtlasError(f"softness must be >= 0, got {softness}")

    center = (size - 1) / 2.0
    width = softness * size
    halfw = cleft_halfwidth * size

    zi, yi, xi = np.meshgrid(*(np.arange(size),) * 3, indexing="ij")
    dz = zi - center

    cleft = _ramp(halfw - np.abs(dz), width)
    pre = _ramp(-dz - halfw, width)
    post = _ramp(dz - halfw, width)

    rz, ry, rx = (r * size / 2.0 for r in SUPPORT_RADII_3D)
    rho = np.sqrt((dz / rz) ** 2 + ((yi - center) / ry) ** 2 + ((xi - center) / rx) ** 2)
    support = _ramp((1.0 - rho) * min(rz, ry, rx), width)

    probs = np.stack([pre, cleft, post], axis=0) * support[None]
    return Atlas(
        class_names=("pre", "cleft", "post"),
        probs=probs,
        builder_params={
            "builder": "synapse",
            "size": size,
            "cleft_halfwidth": cleft_halfwidth,
            "softness": softness,
        },
    )


def build_disc_cup_atlas(
    size: int, disc_radius: float, cup_radius: float, softness: float
) -> Atlas:
    """Concentric 2D atlas: cup blob inside a disc ring.

    The disc class means the annulus only; inside the cup the disc
    probability is 0 (exclusive labels).  Radii and softness are fractions
    of ``size``.
    """
    if size < 8:
        raise AtlasError(f"size must be >= 8, got {size}")
    if not 0.0 < cup_radius < disc_radius < 0.5:
        raise AtlasError(
            f"need 0 < cup_radius < disc_radius < 0.5, got cup={cup_radius}, disc={disc_radius}"
        )
    if softness < 0.0:
        raise AtlasError(f"softness must be >= 0, got {softness}")

    center = (size - 1) / 2.0
    width = softness * size
    yi, xi = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    rho = np.sqrt((yi - center) ** 2 + (xi - center) ** 2)

    cup = _ramp(cup_radius * size - rho, width)
    disc = (1.0 - cup) * _ramp(disc_radius * size - rho, width)

    return Atlas(
        class_names=("disc", "cup"),
        probs=np.stack([disc, cup], axis=0),
        builder_params={
            "builder": "disc_cup",
            "size": size,
            "disc_radius": disc_radius,
            "cup_radius": cup_radius,
            "softness": softness,
        },
    )


def rescale_atlas(atlas: Atlas, factor: float) -> Atlas:
    """Average-pool every class grid by a power-of-two factor in {1, 1/2, 1/4, 1/8}."""
    steps = {1.0: 0, 0.5: 1, 0.25: 2, 0.125: 3}.get(float(factor))
    if steps is None:
        raise AtlasError(f"factor must be one of 1, 1/2, 1/4, 1/8, got {factor}")
    if any(n % (1 << steps) for n in atlas.spatial_shape):
        raise AtlasError(f"shape {atlas.spatial_shape} not divisible by {1 << steps}")
    probs = atlas.probs
    for _ in range(steps):
        probs = AvgPool2().forward(probs)
    return Atlas(atlas.class_names, probs, dict(atlas.builder_params))


def save_atlas(path: str | Path, atlas: Atlas) -> None:
    """Atlas directory: atlas.json plus one TGRID file per class."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "classes": list(atlas.class_names),
        "shape": list(atlas.spatial_shape),
        "builder_params": atlas.builder_params,
    }
    (path / "atlas.json").write_text(json.dumps(meta, indent=2) + "\n")
    for name, grid in zip(atlas.class_names, atlas.probs):
        save_tgrid(path / f"{name}.tgrid", grid)


def load_atlas(path: str | Path) -> Atlas:
    path = Path(path)
    meta = json.loads((path / "atlas.json").read_text())
    grids = [load_tgrid(path / f"{name}.tgrid") for name in meta["classes"]]
    return Atlas(tuple(meta["classes"]), np.stack(grids), meta.get("builder_params", {}))


def class_color(name: str, index: int) -> tuple[float, float, float]:
    return CLASS_COLORS.get(name, _FALLBACK_COLORS[index % len(_FALLBACK_COLORS)])


def composite_rgb(atlas: Atlas) -> np.ndarray:
    """Color preview slice: hue by class, saturation by probability.

    3D atlases are shown as their central z slice.  Returns (H, W, 3).
    """
    probs = atlas.probs
    if atlas.ndim == 3:
        probs = probs[:, probs.shape[1] // 2]
    rgb = np.zeros(probs.shape[1:] + (3,))
    for k, name in enumerate(atlas.class_names):
        color = np.array(class_color(name, k))
        rgb += probs[k][..., None] * color[None, None]
    return np.clip(rgb, 0.0, 1.0)


def export_previews(path: str | Path, atlas: Atlas) -> None:
    """Per-class PGM slices plus a composite PPM in the given directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, grid in zip(atlas.class_names, atlas.probs):
        img = grid[grid.shape[0] // 2] if atlas.ndim == 3 else grid
        write_pgm(path / f"{name}.pgm", img)
    write_ppm(path / "composite.ppm", composite_rgb(atlas))
