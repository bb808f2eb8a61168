"""NTB tensor file format.

Layout: 8-byte magic ``CVQTNSR1``, little-endian u32 rank, rank little-endian
u64 dims, then the row-major float64 payload. Used by checkpoints and
dataset shards. Integer-valued tensors (token indices, labels) are stored
as float64; values below 2**53 round-trip exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from cvq.errors import DataError

MAGIC = b"CVQTNSR1"
_MAX_RANK = 32


def write_ntb(path: str | Path, array: np.ndarray) -> None:
    # np.ascontiguousarray would promote rank 0 to rank 1; asarray keeps it.
    arr = np.asarray(array, dtype=np.float64, order="C")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_ntb(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad NTB magic")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated NTB header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    if rank > _MAX_RANK:
        raise DataError(f"{path}: implausible NTB rank {rank}")
    header_end = 12 + 8 * rank
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated NTB dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = header_end + 8 * count
    if len(raw) != expected:
        raise DataError(f"{path}: payload size {len(raw) - header_end}, expected {8 * count}")
    data = np.frombuffer(raw, dtype="<f8", offset=header_end, count=count)
    return data.astype(np.float64).reshape(dims)
