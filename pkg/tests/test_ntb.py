"""Tensor container format: round-trips and corruption handling."""

import struct

import numpy as np
import pytest

from cvq.errors import DataError
from cvq.ntb import MAGIC, read_ntb, write_ntb


@pytest.mark.parametrize("shape", [(), (1,), (5,), (3, 4), (2, 3, 4, 5)])
def test_round_trip(tmp_path, shape):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=shape)
    path = tmp_path / "t.ntb"
    write_ntb(path, arr)
    back = read_ntb(path)
    assert back.shape == arr.shape
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_integers_survive_exactly(tmp_path):
    arr = np.arange(2**40, 2**40 + 16, dtype=np.int64).reshape(4, 4)
    path = tmp_path / "i.ntb"
    write_ntb(path, arr.astype(np.float64))
    assert np.array_equal(read_ntb(path).astype(np.int64), arr)


def test_layout_is_as_documented(tmp_path):
    """magic, u32 rank, u64 dims, little-endian f64 row-major payload."""
    arr = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = tmp_path / "l.ntb"
    write_ntb(path, arr)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    rank = struct.unpack("<I", raw[8:12])[0]
    assert rank == 2
    dims = struct.unpack("<2Q", raw[12:28])
    assert dims == (2, 2)
    payload = np.frombuffer(raw[28:], dtype="<f8")
    assert np.array_equal(payload, [1.0, 2.0, 3.0, 4.0])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ntb"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(DataError):
        read_ntb(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "trunc.ntb"
    write_ntb(path, np.ones((4, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DataError):
        read_ntb(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "extra.ntb"
    write_ntb(path, np.ones(3))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        read_ntb(path)


def test_absurd_rank_rejected(tmp_path):
    path = tmp_path / "rank.ntb"
    path.write_bytes(MAGIC + struct.pack("<I", 99))
    with pytest.raises(DataError):
        read_ntb(path)
