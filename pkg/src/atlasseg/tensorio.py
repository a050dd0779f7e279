"""Tensor grid file format (TGRID v1) and simple image previews (PGM/PPM).

TGRID v1 layout:
    8 bytes   magic ``TGRID\\0v1``
    4 bytes   little-endian uint32, length N of the JSON header
    N bytes   UTF-8 JSON ``{"shape": [...], "dtype": "f64"}``
    rest      raw little-endian float64 payload, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TGRID\0v1"


class TensorFormatError(ValueError):
    """Raised when a TGRID file is malformed."""


def save_tgrid(path: str | Path, array: np.ndarray) -> None:
    """Write an array as a TGRID v1 file (always stored as float64)."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f64"}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.astype("<f8", copy=False).tobytes())


def load_tgrid(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("dtype") != "f64":
            raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        shape = tuple(int(s) for s in header["shape"])
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise TensorFormatError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def _to_byte(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (P5) from a 2D array with values in [0, 1]."""
    if image.ndim != 2:
        raise ValueError(f"PGM preview needs a 2D array, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_byte(image).tobytes())


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary PPM (P6) from an (H, W, 3) array with values in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM preview needs an (H, W, 3) array, got shape {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_byte(image).tobytes())
