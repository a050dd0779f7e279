"""Tests for the TGRID binary format and PGM/PPM preview writers."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from atlasseg.tensorio import (
    MAGIC,
    TensorFormatError,
    load_tgrid,
    save_tgrid,
    write_pgm,
    write_ppm,
)


def test_round_trip_preserves_values_and_shape(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (4, 3, 2), (1, 2, 3, 4)]:
        arr = rng.standard_normal(shape)
        path = tmp_path / "a.tgrid"
        save_tgrid(path, arr)
        back = load_tgrid(path)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, arr)


def test_round_trip_is_byte_stable(tmp_path):
    arr = np.arange(12.0).reshape(3, 4)
    a, b = tmp_path / "a.tgrid", tmp_path / "b.tgrid"
    save_tgrid(a, arr)
    save_tgrid(b, arr)
    assert a.read_bytes() == b.read_bytes()


def test_integer_input_is_stored_as_float64(tmp_path):
    path = tmp_path / "i.tgrid"
    save_tgrid(path, np.array([[1, 2], [3, 4]], dtype=np.int64))
    back = load_tgrid(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, [[1.0, 2.0], [3.0, 4.0]])


def test_scalar_array(tmp_path):
    path = tmp_path / "s.tgrid"
    save_tgrid(path, np.float64(7.5))
    assert load_tgrid(path) == 7.5


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tgrid"
    path.write_bytes(b"NOTGRID!" + b"\0" * 16)
    with pytest.raises(TensorFormatError, match="magic"):
        load_tgrid(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.tgrid"
    save_tgrid(path, np.zeros((4, 4)))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(TensorFormatError, match="truncated"):
        load_tgrid(path)


def test_unsupported_dtype_rejected(tmp_path):
    header = b'{"shape": [1], "dtype": "f32"}'
    path = tmp_path / "d.tgrid"
    path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + b"\0" * 4)
    with pytest.raises(TensorFormatError, match="dtype"):
        load_tgrid(path)


def test_pgm_header_and_payload(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0]])  # 2.0 must clip to 255
    path = tmp_path / "p.pgm"
    write_pgm(path, img)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert data[-4:] == bytes([0, 128, 255, 255])


def test_ppm_header_and_payload(tmp_path):
    img = np.zeros((1, 2, 3))
    img[0, 1] = [1.0, 0.0, 0.5]
    path = tmp_path / "p.ppm"
    write_ppm(path, img)
    data = path.read_bytes()
    assert data.startswith(b"P6\n2 1\n255\n")
    assert data[-6:] == bytes([0, 0, 0, 255, 0, 128])


def test_preview_shape_validation(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2, 4)))
