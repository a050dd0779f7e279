"""Affine pose parameterization and the differentiable atlas warp.

A pose is (translation, per-axis scale, rotation).  Rotation is a single
angle in 2D and an angle-axis 3-vector in 3D (direction = axis, magnitude =
angle in radians).  Translations live in normalized units where [-1, 1]
spans the grid, so one normalized unit equals half the grid extent.

The forward map y = A p + t (A = R diag(s), i.e. scale, then rotate, then
translate) sends canonical-atlas coordinates p to image coordinates y.
Warping resamples by the inverse map with multilinear interpolation and
zero fill outside the grid, and carries an analytic gradient of the warped
values with respect to every pose component.

Coordinate conventions: math vectors are (x, y) in 2D and (x, y, z) in 3D,
where x runs along the last array axis, y along the second-to-last, z along
the third-to-last.  Array index i on an axis of length n maps to the
normalized coordinate (2 i - (n - 1)) / n.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Below this angle the Rodrigues formula switches to its series expansion.
_SMALL_ANGLE = 1e-8
# Fractional indices this close to an integer are snapped, so that grid-
# aligned poses (identity, integer shifts, quarter turns) resample exactly.
_SNAP = 1e-9


class PoseError(ValueError):
    """Invalid pose parameters."""


_COMPONENT_NAMES = {
    2: ("t_x", "t_y", "s_x", "s_y", "r"),
    3: ("t_x", "t_y", "t_z", "s_x", "s_y", "s_z", "r_x", "r_y", "r_z"),
}


@dataclass(frozen=True)
class Pose:
    """Affine registration parameters for a 2D or 3D grid."""

    translation: tuple[float, ...]
    scale: tuple[float, ...]
    rotation: tuple[float, ...]  # (angle,) in 2D, axis-angle (rx, ry, rz) in 3D

    def __post_init__(self) -> None:
        d = len(self.translation)
        if d not in (2, 3):
            raise PoseError(f"pose must be 2D or 3D, got {d} translation components")
        if len(self.scale) != d:
            raise PoseError(f"{d}D pose needs {d} scales, got {len(self.scale)}")
        if len(self.rotation) != (1 if d == 2 else 3):
            raise PoseError(f"{d}D pose has wrong rotation arity {len(self.rotation)}")
        if any(s <= 0 for s in self.scale):
            raise PoseError(f"scales must be strictly positive, got {self.scale}")

    @property
    def ndim(self) -> int:
        return len(self.translation)

    @staticmethod
    def identity(ndim: int) -> "Pose":
        if ndim not in (2, 3):
            raise PoseError(f"ndim must be 2 or 3, got {ndim}")
        return Pose(
            translation=(0.0,) * ndim,
            scale=(1.0,) * ndim,
            rotation=(0.0,) * (1 if ndim == 2 else 3),
        )

    def to_vector(self) -> np.ndarray:
        """Components in (t, s, r) order; scales stored as ratios."""
        return np.array(self.translation + self.scale + self.rotation)

    def to_raw(self) -> np.ndarray:
        """Unconstrained parameterization: scales replaced by their logs."""
        return np.concatenate(
            [self.translation, np.log(self.scale), self.rotation]
        )

    @staticmethod
    def from_raw(raw: np.ndarray, ndim: int) -> "Pose":
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (pose_dim(ndim),):
            raise PoseError(f"raw pose for {ndim}D must have {pose_dim(ndim)} entries, got {raw.shape}")
        d = ndim
        return Pose(
            translation=tuple(raw[:d]),
            scale=tuple(np.exp(raw[d : 2 * d])),
            rotation=tuple(raw[2 * d :]),
        )

    @staticmethod
    def from_vector(vec: np.ndarray, ndim: int) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (pose_dim(ndim),):
            raise PoseError(f"pose vector for {ndim}D must have {pose_dim(ndim)} entries, got {vec.shape}")
        d = ndim
        return Pose(tuple(vec[:d]), tuple(vec[d : 2 * d]), tuple(vec[2 * d :]))

    def to_json(self) -> list:
        names = _COMPONENT_NAMES[self.ndim]
        return [{"name": n, "value": float(v)} for n, v in zip(names, self.to_vector())]

    @staticmethod
    def from_json(obj: list) -> "Pose":
        values = {entry["name"]: float(entry["value"]) for entry in obj}
        ndim = 2 if set(values) == set(_COMPONENT_NAMES[2]) else 3
        if set(values) != set(_COMPONENT_NAMES[ndim]):
            raise PoseError(f"unrecognized pose components {sorted(values)}")
        vec = np.array([values[n] for n in _COMPONENT_NAMES[ndim]])
        return Pose.from_vector(vec, ndim)


def pose_dim(ndim: int) -> int:
    return 5 if ndim == 2 else 9


def save_pose(path: str | Path, pose: Pose) -> None:
    Path(path).write_text(json.dumps(pose.to_json(), indent=2) + "\n")


def load_pose(path: str | Path) -> Pose:
    return Pose.from_json(json.loads(Path(path).read_text()))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def angle_axis_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for an angle-axis 3-vector."""
    r = np.asarray(r, dtype=float)
    theta = float(np.linalg.norm(r))
    k = _skew(r)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def angle_axis_jacobian(r: np.ndarray) -> list[np.ndarray]:
    """dR/dr_i for each component of the angle-axis vector."""
    r = np.asarray(r, dtype=float)
    theta2 = float(r @ r)
    rot = angle_axis_to_matrix(r)
    jac = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        if theta2 < _SMALL_ANGLE**2:
            jac.append(_skew(e))
        else:
            v = r[i] * r + np.cross(r, (np.eye(3) - rot) @ e)
            jac.append(_skew(v / theta2) @ rot)
    return jac


def rotation_matrix(rotation: tuple[float, ...]) -> np.ndarray:
    """Rotation matrix for a pose's rotation component (2D angle or 3D angle-axis)."""
    if len(rotation) == 1:
        c, s = np.cos(rotation[0]), np.sin(rotation[0])
        return np.array([[c, -s], [s, c]])
    return angle_axis_to_matrix(np.asarray(rotation))


def rotation_jacobian(rotation: tuple[float, ...]) -> list[np.ndarray]:
    if len(rotation) == 1:
        c, s = np.cos(rotation[0]), np.sin(rotation[0])
        return [np.array([[-s, -c], [c, -s]])]
    return angle_axis_jacobian(np.asarray(rotation))


def pose_to_affine(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(linear, offset) in normalized coordinates; linear = R(r) diag(s)."""
    rot = rotation_matrix(pose.rotation)
    linear = rot @ np.diag(pose.scale)
    if abs(np.linalg.det(linear)) < 1e-9:
        raise PoseError(f"affine map degenerate: det = {np.linalg.det(linear):g}")
    return linear, np.array(pose.translation)


def _coord_1d(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) - (n - 1)) / n


class WarpCache:
    """Forward state needed by warp_backward."""

    def __init__(self, probs, pose, minv, sample_p, frac, base, weights, valid):
        self.probs = probs
        self.pose = pose
        self.minv = minv
        self.sample_p = sample_p  # (d, *spatial) math-order sample coords
        self.frac = frac          # (d_arr, *spatial) fractional array indices
        self.base = base
        self.weights = weights
        self.valid = valid


def warp(probs: np.ndarray, pose: Pose) -> tuple[np.ndarray, WarpCache]:
    """Resample per-class probability grids under the pose's affine map.

    ``probs`` is (K, *spatial).  Returns the warped grids plus the cache for
    warp_backward.  Samples falling outside the grid read as 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    d = probs.ndim - 1
    if d != pose.ndim:
        raise PoseError(f"{pose.ndim}D pose applied to {d}D grids")
    spatial = probs.shape[1:]

    linear, offset = pose_to_affine(pose)
    minv = np.linalg.inv(linear)

    # Output voxel coordinates in math order (x first); array axes run z,y,x.
    axes_coords = [_coord_1d(n) for n in spatial]
    mesh = np.meshgrid(*axes_coords, indexing="ij")  # array order
    y = np.stack(mesh[::-1], axis=0)  # math order (d, *spatial)
    p = np.tensordot(minv, y - offset.reshape((d,) + (1,) * d), axes=([1], [0]))

    # Fractional array indices, array-axis order (reverse of math order).
    frac = np.empty_like(p)
    for axis in range(d):
        n = spatial[axis]
        f = (n * p[d - 1 - axis] + (n - 1)) / 2.0
        snap = np.rint(f)
        f = np.where(np.abs(f - snap) < _SNAP, snap, f)
        frac[axis] = f

    base = np.floor(frac).astype(np.int64)
    weights = frac - base

    out = np.zeros_like(probs)
    for corner in np.ndindex(*(2,) * d):
        idx = [base[a] + corner[a] for a in range(d)]
        valid = np.ones(spatial, dtype=bool)
        for a in range(d):
            valid &= (idx[a] >= 0) & (idx[a] < spatial[a])
        w = np.ones(spatial)
        for a in range(d):
            w = w * (weights[a] if corner[a] else 1.0 - weights[a])
        clipped = tuple(np.clip(idx[a], 0, spatial[a] - 1) for a in range(d))
        vals = probs[(slice(None),) + clipped]
        out += vals * (w * valid)[None]

    cache = WarpCache(probs, pose, minv, p, frac, base, weights,
                      None)
    return out, cache


def warp_backward(upstream: np.ndarray, cache: WarpCache) -> np.ndarray:
    """Gradient of <upstream, warp(probs, pose)> w.r.t. the pose vector.

    Returned in (t, s, r) order with scales in ratio (not log) space.
    """
    if cache is None:
        raise PoseError("warp_backward called without a forward cache")
    probs = cache.probs
    d = probs.ndim - 1
    spatial = probs.shape[1:]
    if upstream.shape != probs.shape:
        raise PoseError(f"upstream shape {upstream.shape} != warped shape {probs.shape}")

    base, weights = cache.base, cache.weights

    # d(sum_ch upstream*value)/d frac, per array axis.
    dval_dfrac = np.zeros((d,) + spatial)
    up_sum_cache: dict[tuple, np.ndarray] = {}
    for corner in np.ndindex(*(2,) * d):
        idx = [base[a] + corner[a] for a in range(d)]
        valid = np.ones(spatial, dtype=bool)
        for a in range(d):
            valid &= (idx[a] >= 0) & (idx[a] < spatial[a])
        clipped = tuple(np.clip(idx[a], 0, spatial[a] - 1) for a in range(d))
        vals = (upstream * probs[(slice(None),) + clipped]).sum(axis=0) * valid
        up_sum_cache[corner] = vals
    for axis in range(d):
        for corner in np.ndindex(*(2,) * d):
            w = np.ones(spatial)
            for a in range(d):
                if a == axis:
                    continue
                w = w * (weights[a] if corner[a] else 1.0 - weights[a])
            sign = 1.0 if corner[axis] else -1.0
            dval_dfrac[axis] += sign * w * up_sum_cache[corner]

    # Chain to math-order sample coords: frac[axis] = (n p_math + n - 1)/2.
    g_p = np.empty((d,) + spatial)
    for axis in range(d):
        g_p[d - 1 - axis] = dval_dfrac[axis] * (spatial[axis] / 2.0)

    minv = cache.minv
    pose = cache.pose
    g_flat = g_p.reshape(d, -1)
    p_flat = cache.sample_p.reshape(d, -1)

    grad_t = -minv.T @ g_flat.sum(axis=1)
    # P = sum_vox p g^T; then d/dtheta = -trace(Minv dA P).
    pmat = p_flat @ g_flat.T
    rot = rotation_matrix(pose.rotation)
    rot_jac = rotation_jacobian(pose.rotation)
    scale = np.array(pose.scale)

    grad_s = np.empty(d)
    for j in range(d):
        da = np.zeros((d, d))
        da[:, j] = rot[:, j]
        grad_s[j] = -np.trace(minv @ da @ pmat)
    grad_r = np.empty(len(pose.rotation))
    for k, dr in enumerate(rot_jac):
        da = dr @ np.diag(scale)
        grad_r[k] = -np.trace(minv @ da @ pmat)
    return np.concatenate([grad_t, grad_s, grad_r])


def pose_loss(raw_pred: np.ndarray, raw_true: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared componentwise error and its gradient w.r.t. raw_pred."""
    raw_pred = np.asarray(raw_pred, dtype=float)
    raw_true = np.asarray(raw_true, dtype=float)
    if raw_pred.shape != raw_true.shape:
        raise PoseError(f"pose dimension mismatch: {raw_pred.shape} vs {raw_true.shape}")
    diff = raw_pred - raw_true
    n = diff.size
    return float(diff @ diff) / n, 2.0 * diff / n


def pose_errors(pred: Pose, true: Pose, grid_size: int) -> tuple[float, float]:
    """(orientation error in degrees, localization error in pixels)."""
    if pred.ndim != true.ndim:
        raise PoseError(f"pose dimensionality mismatch: {pred.ndim} vs {true.ndim}")
    r_pred = rotation_matrix(pred.rotation)
    r_true = rotation_matrix(true.rotation)
    rel = r_pred.T @ r_true
    if pred.ndim == 2:
        angle = abs(np.arctan2(rel[1, 0], rel[0, 0]))
    else:
        cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
        angle = np.arccos(cos)
    loc = np.linalg.norm(np.array(pred.translation) - np.array(true.translation))
    return float(np.degrees(angle)), float(loc * grid_size / 2.0)
