"""CSV and PGM emitters with fixed formatting.

All numeric text output uses 9-significant-digit formatting so that
deterministic runs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(value: float) -> str:
    """Format a number with 9 significant digits."""
    return format(float(value), ".9g")


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {matrix.shape}")
    lines = [",".join(fmt(v) for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_rows_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D u8 array."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {gray.shape}")
    if gray.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {gray.dtype}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def to_u8(values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Scale [lo, hi] values to u8 0..255 (clipped, round-half-even)."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        raise ValueError("hi must exceed lo")
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)
