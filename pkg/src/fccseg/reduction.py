"""Learnable 1x1 channel reduction over correlation volumes.

The reduction maps a 2n^2-channel dual-condition volume (or any channel
stack) to d output channels with a single weight matrix applied pointwise
at every (query cell, support cell) position. The default d is a quarter
of the input channels, i.e. (2 * n^2) / 4 for the dual fully-cross case.

Weights and gradients live in float64; the fused path streams correlation
channels one at a time so the full input stack is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg.blas import dger

from fccseg import runtime
from fccseg.correlation import (
    SUPPORT_PATH,
    TARGET_PATH,
    ChannelKey,
    CorrelationVolume,
    dual_channel_map,
    iter_channels,
    layer_pairs,
)
from fccseg.episodes import FeatureSet
from fccseg.tensorfile import read_tensor, write_tensor

# staging buffer for channel-major GEMMs, in bytes
_CHUNK_BYTES = 64 << 20


@dataclass(frozen=True)
class ReductionWeights:
    """1x1 convolution parameters: weights [d, in_channels] and bias [d]."""

    weights: np.ndarray
    bias: np.ndarray
    channel_map: tuple[ChannelKey, ...] | None = None

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError(f"weights must be [d, in_channels], got shape {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match d={weights.shape[0]}")
        if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
            raise ValueError("weights and bias must be finite")
        if self.channel_map is not None:
            cm = tuple(tuple(k) for k in self.channel_map)
            if len(cm) != weights.shape[1]:
                raise ValueError(
                    f"channel map has {len(cm)} entries, weights expect {weights.shape[1]}"
                )
            object.__setattr__(self, "channel_map", cm)
        for name, arr in (("weights", weights), ("bias", bias)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


def default_out_channels(in_channels: int) -> int:
    """Default reduced width: a quarter of the input channels (>= 1)."""
    return max(1, in_channels // 4)


def init_weights(
    in_channels: int,
    out_channels: int | None = None,
    seed: int = 0,
    with_bias: bool = True,
    channel_map: tuple[ChannelKey, ...] | None = None,
) -> ReductionWeights:
    """Seeded uniform init in [-a, a] with a = 1/sqrt(in_channels)."""
    if in_channels < 1:
        raise ValueError("in_channels must be >= 1")
    d = default_out_channels(in_channels) if out_channels is None else out_channels
    if d < 1:
        raise ValueError("out_channels must be >= 1")
    rng = np.random.default_rng(seed)
    a = 1.0 / np.sqrt(in_channels)
    weights = rng.uniform(-a, a, size=(d, in_channels))
    bias = rng.uniform(-a, a, size=d) if with_bias else np.zeros(d)
    return ReductionWeights(weights=weights, bias=bias, channel_map=channel_map)


def _as_array(vol: CorrelationVolume | np.ndarray) -> np.ndarray:
    return vol.data if isinstance(vol, CorrelationVolume) else np.asarray(vol)


def reduce_volume(
    vol: CorrelationVolume | np.ndarray,
    w: ReductionWeights,
    dtype: np.dtype = np.float32,
) -> np.ndarray:
    """Apply the 1x1 reduction: out[k, ...] = sum_c w[k, c] * vol[c, ...] + bias[k].

    Output values are unbounded; accumulation is float64 and positions are
    processed in fixed-size chunks.
    """
    data = _as_array(vol)
    if data.shape[0] != w.in_channels:
        raise ValueError(f"volume has {data.shape[0]} channels, weights expect {w.in_channels}")
    ch = data.shape[0]
    spatial = data.shape[1:]
    flat = data.reshape(ch, -1)
    positions = flat.shape[1]
    out = np.empty((w.out_channels, positions), dtype=np.float64)
    step = max(1, _CHUNK_BYTES // (ch * 8))
    with runtime.compute_limits():
        for start in range(0, positions, step):
            stop = min(start + step, positions)
            out[:, start:stop] = w.weights @ flat[:, start:stop].astype(np.float64)
    out += w.bias[:, None]
    return out.reshape((w.out_channels,) + spatial).astype(dtype, copy=False)


def fused_fcc_reduce(
    target: FeatureSet,
    support: FeatureSet,
    query: FeatureSet,
    w: ReductionWeights,
    dtype: np.dtype = np.float32,
) -> np.ndarray:
    """Reduction of the dual fully-cross volume without materializing it.

    Numerically equal to
    reduce_volume(dcfc_concat(fcc(target, query), fcc(support, query)), w)
    while holding only one input channel plus the d output channels.
    """
    n = query.n_layers
    expected = dual_channel_map("fully_cross", n)
    if w.in_channels != len(expected):
        raise ValueError(
            f"weights expect {w.in_channels} input channels, dual fully-cross has {len(expected)}"
        )
    hq, wq = query.grid
    hs, ws = target.grid
    if target.grid != support.grid:
        raise ValueError("target and support grids differ")
    positions = hq * wq * hs * ws
    # Fortran order so the BLAS rank-1 update runs in place, with no
    # d x positions temporary; dger has no reduction, so the result is
    # bitwise independent of the thread count.
    acc = np.zeros((w.out_channels, positions), dtype=np.float64, order="F")
    pairs = layer_pairs("fully_cross", n)
    c = 0
    for side, path in ((target, TARGET_PATH), (support, SUPPORT_PATH)):
        for _, chan in iter_channels(side, query, pairs, path):
            # one channel in flight; accumulate its weighted contribution
            dger(
                1.0,
                w.weights[:, c],
                chan.reshape(positions).astype(np.float64),
                a=acc,
                overwrite_a=1,
            )
            c += 1
    acc += w.bias[:, None]
    out = np.asarray(acc, dtype=dtype, order="C")
    return out.reshape((w.out_channels, hq, wq, hs, ws))


def reduce_backward(
    vol: CorrelationVolume | np.ndarray,
    w: ReductionWeights,
    upstream_grad: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of reduce_volume w.r.t. weights and bias.

    grad_w[k, c] = sum over positions of upstream[k, pos] * vol[c, pos];
    grad_bias[k] = sum over positions of upstream[k, pos].
    """
    data = _as_array(vol)
    upstream = np.asarray(upstream_grad)
    if data.shape[0] != w.in_channels:
        raise ValueError(f"volume has {data.shape[0]} channels, weights expect {w.in_channels}")
    if upstream.shape[0] != w.out_channels or upstream.shape[1:] != data.shape[1:]:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match (d={w.out_channels}, spatial {data.shape[1:]})"
        )
    flat = data.reshape(data.shape[0], -1)
    up = upstream.reshape(upstream.shape[0], -1).astype(np.float64)
    positions = flat.shape[1]
    grad_w = np.zeros((w.out_channels, w.in_channels), dtype=np.float64)
    step = max(1, _CHUNK_BYTES // (w.in_channels * 8))
    with runtime.compute_limits():
        for start in range(0, positions, step):
            stop = min(start + step, positions)
            grad_w += up[:, start:stop] @ flat[:, start:stop].astype(np.float64).T
    grad_bias = up.sum(axis=1)
    return grad_w, grad_bias


def weight_heatmap(
    w: ReductionWeights,
    channel_map: tuple[ChannelKey, ...] | None = None,
    n_layers: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Layer-pair prioritization: mean |weight| per (i, j), split by path.

    Entry (i, j) of each n x n matrix is the mean over output channels of
    |w[k, channel(path, i, j)]|; pairs absent from the channel map stay 0.
    """
    cm = channel_map if channel_map is not None else w.channel_map
    if cm is None:
        raise ValueError("no channel map available for heatmap")
    if len(cm) != w.in_channels:
        raise ValueError(f"channel map covers {len(cm)} channels, weights expect {w.in_channels}")
    if n_layers is None:
        n_layers = 1 + max(max(i, j) for _, i, j in cm)
    target = np.zeros((n_layers, n_layers), dtype=np.float64)
    support = np.zeros((n_layers, n_layers), dtype=np.float64)
    mean_abs = np.abs(w.weights).mean(axis=0)
    for c, (path, i, j) in enumerate(cm):
        matrix = target if path == TARGET_PATH else support
        matrix[i, j] = mean_abs[c]
    return target, support


# Serialization -------------------------------------------------------------

def save_weights(stem: str | Path, w: ReductionWeights) -> None:
    """Write <stem>.weights.fcct, <stem>.bias.fcct, and the channel-map sidecar."""
    stem = str(stem)
    write_tensor(stem + ".weights.fcct", w.weights.shape, w.weights.astype(np.float32))
    write_tensor(stem + ".bias.fcct", w.bias.shape, w.bias.astype(np.float32))
    if w.channel_map is not None:
        lines = [f"{p} {i} {j}" for p, i, j in w.channel_map]
        Path(stem + ".channel_map.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_weights(stem: str | Path) -> ReductionWeights:
    stem = str(stem)
    wd, weights = read_tensor(stem + ".weights.fcct")
    bd, bias = read_tensor(stem + ".bias.fcct")
    if len(wd) != 2 or len(bd) != 1:
        raise ValueError(f"{stem}: expected rank-2 weights and rank-1 bias, got {wd} / {bd}")
    channel_map = None
    sidecar = Path(stem + ".channel_map.txt")
    if sidecar.exists():
        keys = []
        for line in sidecar.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            p, i, j = line.split()
            keys.append((p, int(i), int(j)))
        channel_map = tuple(keys)
    return ReductionWeights(
        weights=weights.astype(np.float64),
        bias=bias.astype(np.float64),
        channel_map=channel_map,
    )
