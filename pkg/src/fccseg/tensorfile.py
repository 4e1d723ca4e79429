"""Bit-exact binary tensor container.

Layout (all integers little-endian):

    bytes 0..3    magic "FCCT"
    bytes 4..7    u32 version, currently 1
    byte  8       u8 dtype: 0 = IEEE-754 binary32, 1 = u8
    byte  9       u8 rank, 1..4
    bytes 10..11  u16 reserved, must be 0
    bytes 12..19  u64 element count
    then rank * u32 dims
    then the payload, row-major, last index fastest

Feature stacks are stored as float32 with dims [n_layers, C, grid_h,
grid_w]; grid masks as u8 with dims [grid_h, grid_w]. Writing and reading
are value-identical round trips; readers validate magic, version, dtype,
dims, payload length, and (for float data) finiteness.
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
MAX_RANK = 4
MAX_DIM = 2**31 - 1

_HEADER = struct.Struct("<4sIBBHQ")
HEADER_SIZE = _HEADER.size  # 20 bytes

_NUMPY_DTYPES = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_U8: np.dtype("u1"),
}


class TensorFormatError(ValueError):
    """Raised for malformed tensor files or invalid write requests."""


def _dtype_code(array: np.ndarray) -> int:
    if array.dtype.kind == "f":
        return DTYPE_F32
    if array.dtype.kind in ("u", "i", "b"):
        return DTYPE_U8
    raise TensorFormatError(f"unsupported payload dtype {array.dtype}")


def write_tensor(path: str | Path, dims: Sequence[int], payload: np.ndarray | Sequence[float]) -> None:
    """Write a tensor file; the on-disk bytes are a pure function of the input.

    Float payloads are stored as float32 and must be finite. Integer or
    boolean payloads are stored as u8 and must fit in [0, 255].
    """
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise TensorFormatError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"all dims must be >= 1, got {dims}")
    if any(d > MAX_DIM for d in dims):
        raise TensorFormatError(f"dimension overflow: {dims} exceeds {MAX_DIM}")

    array = np.asarray(payload)
    count = int(np.prod(dims, dtype=np.uint64))
    if array.size != count:
        raise TensorFormatError(f"payload has {array.size} elements, dims {dims} require {count}")

    code = _dtype_code(array)
    if code == DTYPE_F32:
        if not np.isfinite(array).all():
            raise TensorFormatError("payload contains non-finite values")
        data = np.ascontiguousarray(array, dtype="<f4")
    else:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise TensorFormatError("u8 payload values must lie in [0, 255]")
        data = np.ascontiguousarray(array, dtype="u1")

    header = _HEADER.pack(MAGIC, VERSION, code, len(dims), 0, count)
    dim_words = struct.pack(f"<{len(dims)}I", *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dim_words)
        fh.write(data.reshape(-1).tobytes())


def read_tensor(path: str | Path) -> tuple[tuple[int, ...], np.ndarray]:
    """Read a tensor file, returning (dims, array shaped to dims)."""
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < HEADER_SIZE:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, rank, reserved, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _NUMPY_DTYPES:
        raise TensorFormatError(f"{path}: unsupported dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{path}: invalid rank {rank}")
    if reserved != 0:
        raise TensorFormatError(f"{path}: reserved field must be 0, got {reserved}")

    dims_end = HEADER_SIZE + 4 * rank
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", raw, HEADER_SIZE)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"{path}: invalid dims {dims}")
    expected = int(np.prod(dims, dtype=np.uint64))
    if count != expected:
        raise TensorFormatError(f"{path}: element count {count} does not match dims {dims}")

    dtype = _NUMPY_DTYPES[code]
    payload_bytes = expected * dtype.itemsize
    if len(raw) != dims_end + payload_bytes:
        raise TensorFormatError(
            f"{path}: payload is {len(raw) - dims_end} bytes, expected {payload_bytes}"
        )

    array = np.frombuffer(raw, dtype=dtype, count=expected, offset=dims_end).reshape(dims)
    if code == DTYPE_F32 and not np.isfinite(array).all():
        raise TensorFormatError(f"{path}: payload contains non-finite values")
    return tuple(int(d) for d in dims), array.copy()
