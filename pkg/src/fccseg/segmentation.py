"""Training-free prior masks from correlation volumes.

The prior score of a query cell is the per-channel maximum correlation
over foreground support cells, averaged across channels and min-max
normalized to [0, 1]. Thresholding at an inclusive cut gives the binary
prediction; K per-shot score maps merge by summing and dividing by the
highest summed score.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from fccseg.correlation import CorrelationVolume
from fccseg.episodes import GridMask
from fccseg.tensorfile import read_tensor, write_tensor
from fccseg.textio import to_u8, write_pgm

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoreMap:
    """Per-query-cell foreground evidence on the patch grid."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"score map must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("score map contains non-finite values")
        values = np.ascontiguousarray(values)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def is_normalized(self) -> bool:
        return bool(self.values.min() >= 0.0 and self.values.max() <= 1.0)


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map normalizes to all 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def prior_score(
    vol: CorrelationVolume | np.ndarray,
    support_mask: GridMask,
    normalize: bool = True,
) -> ScoreMap:
    """Aggregate a correlation volume (or reduced tensor) into a query score map.

    Per channel, each query cell takes its maximum correlation over
    foreground support cells; channels are then averaged and the map
    min-max normalized.
    """
    data = vol.data if isinstance(vol, CorrelationVolume) else np.asarray(vol)
    if data.ndim != 5:
        raise ValueError(f"expected [channel, hq, wq, hs, ws], got shape {data.shape}")
    ch, hq, wq, hs, ws = data.shape
    if (hs, ws) != (support_mask.grid_h, support_mask.grid_w):
        raise ValueError(
            f"support extents {(hs, ws)} do not match mask {(support_mask.grid_h, support_mask.grid_w)}"
        )
    fg = np.flatnonzero(support_mask.values.reshape(-1) == 1)
    if fg.size == 0:
        raise ValueError("support mask has no foreground cells")
    flat = data.reshape(ch, hq * wq, hs * ws)
    per_channel = flat[:, :, fg].max(axis=2)
    raw = per_channel.mean(axis=0, dtype=np.float64).reshape(hq, wq)
    return ScoreMap(minmax_normalize(raw) if normalize else raw)


def prior_score_streamed(
    channels: Iterable[np.ndarray],
    support_mask: GridMask,
    normalize: bool = True,
) -> ScoreMap:
    """prior_score over channels delivered one at a time.

    Aggregation is identical to prior_score (per-channel max over
    foreground, channel mean, min-max normalization) but only one channel
    is held in memory, which is what the bulk evaluation path uses.
    """
    fg = np.flatnonzero(support_mask.values.reshape(-1) == 1)
    if fg.size == 0:
        raise ValueError("support mask has no foreground cells")
    acc: np.ndarray | None = None
    count = 0
    shape: tuple[int, int] | None = None
    for chan in channels:
        if chan.ndim != 4:
            raise ValueError(f"expected [hq, wq, hs, ws] channels, got shape {chan.shape}")
        hq, wq, hs, ws = chan.shape
        if (hs, ws) != (support_mask.grid_h, support_mask.grid_w):
            raise ValueError(
                f"support extents {(hs, ws)} do not match mask "
                f"{(support_mask.grid_h, support_mask.grid_w)}"
            )
        per_query = chan.reshape(hq * wq, hs * ws)[:, fg].max(axis=1)
        if acc is None:
            acc = np.zeros(hq * wq, dtype=np.float64)
            shape = (hq, wq)
        acc += per_query
        count += 1
    if acc is None or shape is None:
        raise ValueError("need at least one channel")
    raw = (acc / count).reshape(shape)
    return ScoreMap(minmax_normalize(raw) if normalize else raw)


def threshold_mask(s: ScoreMap, tau: float = DEFAULT_THRESHOLD) -> GridMask:
    """Binary mask: cell = 1 iff score >= tau (inclusive boundary)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if not s.is_normalized():
        raise ValueError("score map is not normalized to [0, 1]")
    return GridMask((s.values >= tau).astype(np.uint8))


def kshot_merge(preds: list[ScoreMap] | tuple[ScoreMap, ...]) -> ScoreMap:
    """Sum K score maps and normalize by the highest summed score.

    An all-zero sum stays all zero rather than dividing by zero.
    """
    if len(preds) == 0:
        raise ValueError("need at least one prediction")
    extent = (preds[0].grid_h, preds[0].grid_w)
    for p in preds[1:]:
        if (p.grid_h, p.grid_w) != extent:
            raise ValueError("prediction extents differ")
    total = np.zeros(extent, dtype=np.float64)
    for p in preds:
        total += p.values
    peak = total.max()
    if peak == 0.0:
        return ScoreMap(total)
    return ScoreMap(total / peak)


def upsample_mask(m: GridMask, full_h: int, full_w: int) -> np.ndarray:
    """Nearest-neighbor expansion of a grid mask to pixel resolution."""
    if full_h < m.grid_h or full_w < m.grid_w:
        raise ValueError(
            f"target extents ({full_h}, {full_w}) smaller than grid ({m.grid_h}, {m.grid_w})"
        )
    rows = (np.arange(full_h) * m.grid_h) // full_h
    cols = (np.arange(full_w) * m.grid_w) // full_w
    return m.values[rows[:, None], cols[None, :]]


# Serialization -------------------------------------------------------------

def save_score_map(path: str | Path, s: ScoreMap) -> None:
    write_tensor(path, s.values.shape, s.values.astype(np.float32))


def load_score_map(path: str | Path) -> ScoreMap:
    dims, data = read_tensor(path)
    if len(dims) != 2:
        raise ValueError(f"{path}: expected rank-2 score map, got dims {dims}")
    return ScoreMap(data.astype(np.float64))


def save_mask(path: str | Path, m: GridMask) -> None:
    write_tensor(path, m.values.shape, m.values)


def mask_to_pgm(path: str | Path, m: GridMask) -> None:
    """Foreground cells rendered as 255 on black."""
    write_pgm(path, (m.values * np.uint8(255)).astype(np.uint8))


def score_map_to_pgm(path: str | Path, s: ScoreMap) -> None:
    write_pgm(path, to_u8(s.values))
