"""Writer (and header-level reader) for the engine's tensor container.

Byte layout, all integers little-endian:

    magic "FCCT" | u32 version = 1 | u8 dtype (0 = f32, 1 = u8) |
    u8 rank (1..4) | u16 reserved = 0 | u64 element count |
    rank x u32 dims | payload, row-major

This is implemented independently of the engine package: the bytes on
disk are the contract.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FCCT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1

_HEADER = struct.Struct("<4sIBBHQ")


def write_tensor(path: str | Path, dims: Sequence[int], payload: np.ndarray) -> None:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 4:
        raise ValueError(f"rank must be 1..4, got {len(dims)}")
    if any(d < 1 or d > 2**31 - 1 for d in dims):
        raise ValueError(f"invalid dims {dims}")
    array = np.asarray(payload)
    count = int(np.prod(dims, dtype=np.uint64))
    if array.size != count:
        raise ValueError(f"payload has {array.size} elements, dims {dims} require {count}")
    if array.dtype.kind == "f":
        if not np.isfinite(array).all():
            raise ValueError("payload contains non-finite values")
        code, data = DTYPE_F32, np.ascontiguousarray(array, dtype="<f4")
    else:
        code, data = DTYPE_U8, np.ascontiguousarray(array, dtype="u1")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, len(dims), 0, count))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(data.reshape(-1).tobytes())


def read_dims(path: str | Path) -> tuple[int, ...]:
    """Parse just the header; used for manifest consistency checks."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, _, rank, _, _ = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    return tuple(int(d) for d in dims)
