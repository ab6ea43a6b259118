"""VTNS binary tensor files.

Layout (all little-endian):
    magic   4 bytes  b"VTNS"
    version u32      1
    dtype   u8       0 = float32 IEEE-754
    rank    u8
    dims    rank * u64
    payload row-major float32

Values live in memory as float64; storage is float32, so a file read back
and rewritten is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VTNS"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBB")


class VtnsFormatError(Exception):
    """Malformed VTNS data; carries the byte offset of the bad field."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_tensor(path: str | Path, data: np.ndarray) -> None:
    """Write an array as a float32 VTNS file."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValueError("refusing to serialize non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path, expect_rank: int | None = None) -> np.ndarray:
    """Read a VTNS file into a float64 array, validating the header."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise VtnsFormatError("truncated header", len(blob))
    magic, version, dtype, rank = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise VtnsFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise VtnsFormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise VtnsFormatError(f"unsupported dtype code {dtype}", 8)
    if expect_rank is not None and rank != expect_rank:
        raise VtnsFormatError(f"rank {rank}, expected {expect_rank}", 9)
    dims_end = _HEADER.size + 8 * rank
    if len(blob) < dims_end:
        raise VtnsFormatError("truncated dims", len(blob))
    dims = struct.unpack_from(f"<{rank}Q", blob, _HEADER.size)
    count = 1
    for d in dims:
        count *= d
    payload = blob[dims_end:]
    if len(payload) != 4 * count:
        raise VtnsFormatError(
            f"payload is {len(payload)} bytes, expected {4 * count}", dims_end
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    out = arr.astype(np.float64)
    if not np.isfinite(out).all():
        raise VtnsFormatError("non-finite payload values", dims_end)
    return out
