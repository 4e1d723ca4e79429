"""Fully connected cross-layer correlation volumes.

Given an n-layer support-side feature stack and an n-layer query stack,
every layer pair (i, j) yields one 4-D cosine-correlation map over
(query cell, support cell). Stacking all n^2 pairs gives the fully
connected correlation volume (FCC); restricting the pairs gives the
same-layer / cross-k / dilated variants; concatenating the volume built
from target features with the one built from full-support features gives
the dual-condition input that the 1x1 reduction consumes.

Channel layout is frozen: within one path, channel index is i * n + j
(i = support-side layer, j = query-side layer, zero-based); in a
dual-path concatenation all target channels precede all support channels.
Every channel records its (path, i, j) origin in the channel map so
reduction weights and heatmaps stay portable across runs.

Dot products accumulate in float64; per-position inverse norms are
precomputed once per stack, with zero-norm positions mapped to inverse
norm 0 so all-zero feature vectors produce exactly 0 everywhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from fccseg import runtime
from fccseg.episodes import FeatureSet, Shot
from fccseg.tensorfile import read_tensor, write_tensor

TARGET_PATH = "target"
SUPPORT_PATH = "support"

ChannelKey = tuple[str, int, int]

_PATTERN_ALIASES = {
    "same": "same_layer",
    "same_layer": "same_layer",
    "cross1": "same_layer",
    "dcross3": "dilated_cross3",
    "dilated_cross3": "dilated_cross3",
    "full": "fully_cross",
    "fully_cross": "fully_cross",
}


def parse_pattern(name: str) -> str:
    """Normalize a layer-pair pattern name; accepts CLI spellings."""
    key = name.strip().lower()
    if key in _PATTERN_ALIASES:
        return _PATTERN_ALIASES[key]
    m = re.fullmatch(r"cross_?(\d+)", key)
    if m:
        k = int(m.group(1))
        if k % 2 == 0 or k < 1:
            raise ValueError(f"cross-k pattern needs odd k >= 1, got {k}")
        return "same_layer" if k == 1 else f"cross_{k}"
    raise ValueError(f"unknown layer pattern {name!r}")


def layer_pairs(pattern: str, n_layers: int) -> tuple[tuple[int, int], ...]:
    """Selected (support-side layer i, query-side layer j) pairs, in frozen order.

    Enumeration is i ascending, then j ascending, so fully_cross matches
    the canonical channel index i * n + j exactly.
    """
    if n_layers < 1:
        raise ValueError("need at least one layer")
    canon = parse_pattern(pattern)
    pairs: list[tuple[int, int]] = []
    for i in range(n_layers):
        for j in range(n_layers):
            if canon == "fully_cross":
                keep = True
            elif canon == "same_layer":
                keep = i == j
            elif canon == "dilated_cross3":
                keep = j in (i - 2, i, i + 2)
            else:
                half = (int(canon.split("_")[1]) - 1) // 2
                keep = abs(i - j) <= half
            if keep:
                pairs.append((i, j))
    return tuple(pairs)


@dataclass(frozen=True)
class CorrelationVolume:
    """A stack of 4-D correlation maps, indexed [channel, q_row, q_col, s_row, s_col]."""

    data: np.ndarray
    channel_map: tuple[ChannelKey, ...]

    def __post_init__(self) -> None:
        if self.data.ndim != 5:
            raise ValueError(f"volume must be 5-D, got shape {self.data.shape}")
        if self.data.shape[0] != len(self.channel_map):
            raise ValueError(
                f"{self.data.shape[0]} channels but {len(self.channel_map)} channel-map entries"
            )
        object.__setattr__(self, "channel_map", tuple(tuple(k) for k in self.channel_map))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def query_extent(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def support_extent(self) -> tuple[int, int]:
        return self.data.shape[3], self.data.shape[4]

    def channel_index(self, path: str, i: int, j: int) -> int:
        return self.channel_map.index((path, i, j))

    def validate_bounds(self, tol: float = 1e-6) -> None:
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < -1.0 - tol or hi > 1.0 + tol:
            raise ValueError(f"correlation values outside [-1, 1]: min {lo}, max {hi}")


def normalized_stack(features: FeatureSet) -> np.ndarray:
    """Float64 stack [layer, C, h*w] scaled by per-position inverse L2 norms.

    Zero-norm positions get inverse norm 0, which makes every cosine
    involving an all-zero vector exactly 0 without branching.
    """
    n, c, h, w = features.data.shape
    flat = features.data.astype(np.float64).reshape(n, c, h * w)
    norms = np.sqrt(np.einsum("lcp,lcp->lp", flat, flat))
    inv = np.zeros_like(norms)
    np.divide(1.0, norms, out=inv, where=norms > 0.0)
    return flat * inv[:, None, :]


def _pair_map(norm_side_layer: np.ndarray, norm_query_layer: np.ndarray) -> np.ndarray:
    # [C, Ps] x [C, Pq] -> [Pq, Ps], float64 accumulation, float32 storage
    return (norm_query_layer.T @ norm_side_layer).astype(np.float32)


def cosine_map(f_a: np.ndarray, f_b: np.ndarray) -> np.ndarray:
    """Cosine map between two layers; out[qb, qa] = cos(a(qa), b(qb)).

    f_a, f_b: [C, h, w] arrays sharing C. The output is indexed by f_b's
    cells first, [hb, wb, ha, wa]. Zero vectors yield exactly 0.
    """
    f_a = np.asarray(f_a)
    f_b = np.asarray(f_b)
    if f_a.ndim != 3 or f_b.ndim != 3:
        raise ValueError("layers must be [C, h, w]")
    if f_a.shape[0] != f_b.shape[0]:
        raise ValueError(f"channel mismatch: {f_a.shape[0]} vs {f_b.shape[0]}")
    na = normalized_stack(FeatureSet(f_a[None].astype(np.float32, copy=False)))[0]
    nb = normalized_stack(FeatureSet(f_b[None].astype(np.float32, copy=False)))[0]
    ha, wa = f_a.shape[1:]
    hb, wb = f_b.shape[1:]
    with runtime.compute_limits():
        out = _pair_map(na, nb)
    return out.reshape(hb, wb, ha, wa)


def iter_channels(
    side: FeatureSet,
    query: FeatureSet,
    pairs: Sequence[tuple[int, int]],
    path: str = TARGET_PATH,
) -> Iterator[tuple[ChannelKey, np.ndarray]]:
    """Stream correlation channels one at a time, in the given pair order.

    Peak transient memory is a single [hq*wq, hs*ws] float32 map (plus the
    normalized input stacks), which is what makes the fused reduction path
    cheap.
    """
    _check_compatible(side, query)
    norm_side = normalized_stack(side)
    norm_query = normalized_stack(query)
    hq, wq = query.grid
    hs, ws = side.grid
    with runtime.compute_limits():
        for i, j in pairs:
            chan = _pair_map(norm_side[i], norm_query[j]).reshape(hq, wq, hs, ws)
            yield (path, int(i), int(j)), chan


def _check_compatible(side: FeatureSet, query: FeatureSet) -> None:
    if side.n_layers != query.n_layers:
        raise ValueError(f"layer-count mismatch: side {side.n_layers} vs query {query.n_layers}")
    if side.channels != query.channels:
        raise ValueError(f"channel mismatch: side {side.channels} vs query {query.channels}")


def _assemble(
    side: FeatureSet,
    query: FeatureSet,
    pairs: Sequence[tuple[int, int]],
    path: str,
) -> CorrelationVolume:
    hq, wq = query.grid
    hs, ws = side.grid
    keys = tuple((path, int(i), int(j)) for i, j in pairs)
    data = np.empty((len(pairs), hq, wq, hs, ws), dtype=np.float32)
    for idx, (_, chan) in enumerate(iter_channels(side, query, pairs, path)):
        data[idx] = chan
    return CorrelationVolume(data=data, channel_map=keys)


def fcc(side: FeatureSet, query: FeatureSet, path: str = TARGET_PATH) -> CorrelationVolume:
    """The fully connected correlation volume: n^2 channels, index i * n + j."""
    _check_compatible(side, query)
    return _assemble(side, query, layer_pairs("fully_cross", side.n_layers), path)


def fcc_subset(
    side: FeatureSet,
    query: FeatureSet,
    pattern: str,
    path: str = TARGET_PATH,
) -> CorrelationVolume:
    """A correlation volume restricted to the layer pairs a pattern selects."""
    _check_compatible(side, query)
    return _assemble(side, query, layer_pairs(pattern, side.n_layers), path)


def dcfc_concat(fcc_t: CorrelationVolume, fcc_s: CorrelationVolume) -> CorrelationVolume:
    """Concatenate target-path and support-path volumes along channels.

    Target channels come first; the support block's channel map is
    relabeled to the support path with its (i, j) origins preserved.
    """
    if fcc_t.data.shape[1:] != fcc_s.data.shape[1:]:
        raise ValueError(
            f"extent mismatch: {fcc_t.data.shape[1:]} vs {fcc_s.data.shape[1:]}"
        )
    if fcc_t.channels != fcc_s.channels:
        raise ValueError(f"channel-count mismatch: {fcc_t.channels} vs {fcc_s.channels}")
    data = np.concatenate([fcc_t.data, fcc_s.data], axis=0)
    keys = tuple((TARGET_PATH, i, j) for _, i, j in fcc_t.channel_map) + tuple(
        (SUPPORT_PATH, i, j) for _, i, j in fcc_s.channel_map
    )
    return CorrelationVolume(data=data, channel_map=keys)


def build_volume(
    query: FeatureSet,
    shot: Shot,
    pattern: str = "fully_cross",
    dual_path: bool = True,
) -> CorrelationVolume:
    """The correlation input for one shot: target path, plus the support path when dual.

    The dual volume is written into a single allocation (target block first)
    so no concatenation copy is needed.
    """
    _check_compatible(shot.support_target, query)
    pairs = layer_pairs(pattern, query.n_layers)
    hq, wq = query.grid
    hs, ws = shot.support_target.grid
    sides = [(shot.support_target, TARGET_PATH)]
    if dual_path:
        sides.append((shot.support_full, SUPPORT_PATH))
    data = np.empty((len(pairs) * len(sides), hq, wq, hs, ws), dtype=np.float32)
    keys: list[ChannelKey] = []
    idx = 0
    for side, path in sides:
        for key, chan in iter_channels(side, query, pairs, path):
            data[idx] = chan
            keys.append(key)
            idx += 1
    return CorrelationVolume(data=data, channel_map=tuple(keys))


def volume_for_channel_map(
    query: FeatureSet,
    shot: Shot,
    channel_map: Sequence[ChannelKey],
) -> CorrelationVolume:
    """Build exactly the channels a channel map lists.

    The map must follow the frozen layout: every target-path channel before
    every support-path channel. This is how reduction weights trained
    against a map are re-applied to fresh episodes.
    """
    channel_map = tuple(tuple(k) for k in channel_map)
    target_keys = [k for k in channel_map if k[0] == TARGET_PATH]
    support_keys = [k for k in channel_map if k[0] == SUPPORT_PATH]
    if tuple(target_keys) + tuple(support_keys) != channel_map:
        raise ValueError("channel map must list all target channels before support channels")
    if not channel_map:
        raise ValueError("channel map is empty")
    blocks = []
    if target_keys:
        blocks.append(
            _assemble(shot.support_target, query, [(i, j) for _, i, j in target_keys], TARGET_PATH)
        )
    if support_keys:
        blocks.append(
            _assemble(shot.support_full, query, [(i, j) for _, i, j in support_keys], SUPPORT_PATH)
        )
    data = blocks[0].data if len(blocks) == 1 else np.concatenate([b.data for b in blocks], axis=0)
    return CorrelationVolume(data=data, channel_map=channel_map)


def dual_channel_map(pattern: str, n_layers: int) -> tuple[ChannelKey, ...]:
    """The channel map build_volume(dual_path=True) produces for a pattern."""
    pairs = layer_pairs(pattern, n_layers)
    return tuple((TARGET_PATH, i, j) for i, j in pairs) + tuple(
        (SUPPORT_PATH, i, j) for i, j in pairs
    )


def single_channel_map(pattern: str, n_layers: int) -> tuple[ChannelKey, ...]:
    pairs = layer_pairs(pattern, n_layers)
    return tuple((TARGET_PATH, i, j) for i, j in pairs)


# Spill-to-disk -------------------------------------------------------------
#
# The tensor container caps rank at 4, so a 5-D volume is stored as
# [channels, hq*wq, hs*ws] with the grid extents recorded on the first
# line of the channel-map sidecar.

def channel_map_sidecar(volume_path: str | Path) -> Path:
    return Path(str(volume_path) + ".channel_map.txt")


def write_volume(path: str | Path, vol: CorrelationVolume) -> None:
    ch, hq, wq, hs, ws = vol.data.shape
    write_tensor(path, (ch, hq * wq, hs * ws), vol.data.reshape(ch, hq * wq, hs * ws))
    lines = [f"grid {hq} {wq} {hs} {ws}"]
    lines += [f"{p} {i} {j}" for p, i, j in vol.channel_map]
    channel_map_sidecar(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_volume(path: str | Path) -> CorrelationVolume:
    dims, data = read_tensor(path)
    if len(dims) != 3:
        raise ValueError(f"{path}: expected rank-3 volume tensor, got dims {dims}")
    sidecar = channel_map_sidecar(path)
    lines = sidecar.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("grid "):
        raise ValueError(f"{sidecar}: first line must be 'grid hq wq hs ws'")
    hq, wq, hs, ws = (int(tok) for tok in lines[0].split()[1:])
    keys = []
    for line in lines[1:]:
        if not line.strip():
            continue
        p, i, j = line.split()
        if p not in (TARGET_PATH, SUPPORT_PATH):
            raise ValueError(f"{sidecar}: unknown path {p!r}")
        keys.append((p, int(i), int(j)))
    if (hq * wq, hs * ws) != (dims[1], dims[2]):
        raise ValueError(f"{sidecar}: grid line does not match tensor dims {dims}")
    return CorrelationVolume(
        data=data.reshape(dims[0], hq, wq, hs, ws),
        channel_map=tuple(keys),
    )
