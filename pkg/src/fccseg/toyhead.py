"""A miniature trainable segmentation head with hand-derived gradients.

The head composes the 1x1 channel reduction with support-foreground
max-pooling and a per-query-cell logistic readout:

    z(q) = b + sum_k u[k] * max over foreground support cells p of reduced[k, q, p]
    prob(q) = sigmoid(z(q))

Training is plain gradient descent on a Dice / cross-entropy mix. The
backward pass is written out by hand: logistic and loss derivatives, the
max-pool subgradient (all gradient flows to the first row-major argmax on
ties), and the linear-reduction adjoint. Everything runs in float64 and is
bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fccseg.correlation import (
    ChannelKey,
    CorrelationVolume,
    dual_channel_map,
    single_channel_map,
    volume_for_channel_map,
)
from fccseg.episodes import EpisodeBundle, GridMask
from fccseg.evaluation import iou
from fccseg.reduction import (
    ReductionWeights,
    default_out_channels,
    init_weights,
    load_weights,
    reduce_backward,
    reduce_volume,
    save_weights,
)
from fccseg.segmentation import ScoreMap, threshold_mask
from fccseg.tensorfile import read_tensor, write_tensor

CLAMP_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class ToyHeadParams:
    """Reduction weights plus the logistic readout."""

    reduction: ReductionWeights
    readout_w: np.ndarray
    readout_b: float

    def __post_init__(self) -> None:
        readout = np.asarray(self.readout_w, dtype=np.float64)
        if readout.shape != (self.reduction.out_channels,):
            raise ValueError(
                f"readout shape {readout.shape} does not match d={self.reduction.out_channels}"
            )
        if not (np.isfinite(readout).all() and np.isfinite(self.readout_b)):
            raise ValueError("readout parameters must be finite")
        readout = np.ascontiguousarray(readout)
        readout.flags.writeable = False
        object.__setattr__(self, "readout_w", readout)
        object.__setattr__(self, "readout_b", float(self.readout_b))

    @property
    def channel_map(self) -> tuple[ChannelKey, ...]:
        if self.reduction.channel_map is None:
            raise ValueError("head parameters carry no channel map")
        return self.reduction.channel_map


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch: int = 1
    seed: int = 0
    dice_mix: float = 0.5

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 <= self.dice_mix <= 1.0:
            raise ValueError("dice_mix must lie in [0, 1]")


def init_params(
    channel_map: tuple[ChannelKey, ...],
    out_channels: int | None = None,
    seed: int = 0,
) -> ToyHeadParams:
    """Seeded initialization; the channel map fixes which correlations feed the head."""
    in_channels = len(channel_map)
    d = default_out_channels(in_channels) if out_channels is None else out_channels
    reduction = init_weights(in_channels, d, seed=seed, channel_map=channel_map)
    rng = np.random.default_rng(seed + 1)
    a = 1.0 / np.sqrt(d)
    return ToyHeadParams(
        reduction=reduction,
        readout_w=rng.uniform(-a, a, size=d),
        readout_b=0.0,
    )


def head_channel_map(pattern: str, n_layers: int, dual_path: bool = True) -> tuple[ChannelKey, ...]:
    return dual_channel_map(pattern, n_layers) if dual_path else single_channel_map(pattern, n_layers)


@dataclass
class _ForwardCache:
    vol: CorrelationVolume
    fg: np.ndarray
    reduced_fg: np.ndarray      # [d, Q, n_fg] float64
    pooled: np.ndarray          # [d, Q]
    argmax: np.ndarray          # [d, Q] index into fg
    z: np.ndarray               # [Q]
    prob: np.ndarray            # [Q]


def _forward(episode: EpisodeBundle, params: ToyHeadParams) -> _ForwardCache:
    shot = episode.shots[0]
    fg = np.flatnonzero(shot.support_mask.values.reshape(-1) == 1)
    if fg.size == 0:
        raise ValueError("support mask has no foreground cells")
    vol = volume_for_channel_map(episode.query, shot, params.channel_map)
    reduced = reduce_volume(vol, params.reduction, dtype=np.float64)
    d = reduced.shape[0]
    hq, wq = episode.query.grid
    reduced_fg = reduced.reshape(d, hq * wq, -1)[:, :, fg]
    argmax = reduced_fg.argmax(axis=2)
    pooled = np.take_along_axis(reduced_fg, argmax[:, :, None], axis=2)[:, :, 0]
    z = params.readout_b + params.readout_w @ pooled
    prob = 1.0 / (1.0 + np.exp(-z))
    if not np.isfinite(prob).all():
        raise TrainingDiverged("non-finite head activation; parameters have diverged")
    return _ForwardCache(
        vol=vol, fg=fg, reduced_fg=reduced_fg, pooled=pooled, argmax=argmax, z=z, prob=prob
    )


def head_forward(episode: EpisodeBundle, params: ToyHeadParams) -> ScoreMap:
    """Per-query-cell foreground probability, in (0, 1); uses the first shot."""
    cache = _forward(episode, params)
    hq, wq = episode.query.grid
    return ScoreMap(cache.prob.reshape(hq, wq))


def _clamp(prob: np.ndarray) -> np.ndarray:
    return np.clip(prob, CLAMP_EPS, 1.0 - CLAMP_EPS)


def ce_loss(pred: ScoreMap, gt: GridMask) -> float:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    if (pred.grid_h, pred.grid_w) != (gt.grid_h, gt.grid_w):
        raise ValueError("extent mismatch between prediction and ground truth")
    p = _clamp(pred.values.astype(np.float64))
    y = gt.values.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def dice_loss(pred: ScoreMap, gt: GridMask, smoothing: float = 1.0) -> float:
    """1 - (2 * overlap + s) / (|pred| + |gt| + s), on clamped probabilities."""
    if (pred.grid_h, pred.grid_w) != (gt.grid_h, gt.grid_w):
        raise ValueError("extent mismatch between prediction and ground truth")
    p = _clamp(pred.values.astype(np.float64))
    y = gt.values.astype(np.float64)
    overlap = float((p * y).sum())
    return float(1.0 - (2.0 * overlap + smoothing) / (p.sum() + y.sum() + smoothing))


@dataclass(frozen=True)
class ToyHeadGrads:
    reduction_w: np.ndarray
    reduction_bias: np.ndarray
    readout_w: np.ndarray
    readout_b: float


def episode_loss(episode: EpisodeBundle, params: ToyHeadParams, dice_mix: float = 0.5) -> tuple[float, float, float]:
    """(total, ce, dice) for one episode."""
    pred = head_forward(episode, params)
    ce = ce_loss(pred, episode.query_gt)
    dc = dice_loss(pred, episode.query_gt)
    return dice_mix * dc + (1.0 - dice_mix) * ce, ce, dc


def episode_loss_and_grads(
    episode: EpisodeBundle,
    params: ToyHeadParams,
    dice_mix: float = 0.5,
) -> tuple[float, float, float, ToyHeadGrads]:
    """Loss and its hand-derived gradient w.r.t. every parameter."""
    cache = _forward(episode, params)
    y = episode.query_gt.values.reshape(-1).astype(np.float64)
    prob = cache.prob
    p = _clamp(prob)
    n_cells = p.size

    ce = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    overlap = float((p * y).sum())
    denom = float(p.sum() + y.sum() + 1.0)
    numer = 2.0 * overlap + 1.0
    dice = 1.0 - numer / denom
    total = dice_mix * dice + (1.0 - dice_mix) * ce

    # d loss / d clamped probability
    d_ce = (-y / p + (1.0 - y) / (1.0 - p)) / n_cells
    d_dice = (numer - 2.0 * y * denom) / denom**2
    d_p = dice_mix * d_dice + (1.0 - dice_mix) * d_ce
    # clamp passes gradient only strictly inside its range
    inside = (prob > CLAMP_EPS) & (prob < 1.0 - CLAMP_EPS)
    d_z = d_p * inside * prob * (1.0 - prob)

    grad_readout_w = cache.pooled @ d_z
    grad_readout_b = float(d_z.sum())

    # max-pool subgradient: route each (k, q) to its argmax foreground cell
    d_pooled = params.readout_w[:, None] * d_z[None, :]
    d, q_cells = cache.pooled.shape
    upstream_fg = np.zeros_like(cache.reduced_fg)
    np.put_along_axis(upstream_fg, cache.argmax[:, :, None], d_pooled[:, :, None], axis=2)
    spatial = cache.vol.data.shape[1:]
    support_cells = spatial[2] * spatial[3]
    upstream = np.zeros((d, q_cells, support_cells), dtype=np.float64)
    upstream[:, :, cache.fg] = upstream_fg
    upstream = upstream.reshape((d,) + spatial)

    grad_w, grad_bias = reduce_backward(cache.vol, params.reduction, upstream)
    return total, ce, dice, ToyHeadGrads(
        reduction_w=grad_w,
        reduction_bias=grad_bias,
        readout_w=grad_readout_w,
        readout_b=grad_readout_b,
    )


def head_miou(episodes: Sequence[EpisodeBundle], params: ToyHeadParams, tau: float = 0.5) -> float:
    values = []
    for ep in episodes:
        pred = threshold_mask(head_forward(ep, params), tau)
        values.append(iou(pred, ep.query_gt))
    return float(np.mean(values))


@dataclass(frozen=True)
class TrainResult:
    params: ToyHeadParams
    log: tuple[tuple[int, float, float, float, float], ...]  # step, ce, dice, total, heldout_miou
    best_step: int
    best_heldout_loss: float


def train(
    episodes: Sequence[EpisodeBundle],
    cfg: TrainConfig,
    heldout: Sequence[EpisodeBundle] | None = None,
    channel_map: tuple[ChannelKey, ...] | None = None,
    out_channels: int | None = None,
) -> TrainResult:
    """Plain gradient descent; returns the parameters with the lowest held-out loss.

    With no explicit held-out set the training episodes double as one.
    Episodes are consumed in a fixed order, so a fixed seed reproduces the
    returned parameters bitwise.
    """
    if len(episodes) < 1:
        raise ValueError("need at least one training episode")
    if channel_map is None:
        channel_map = head_channel_map("fully_cross", episodes[0].query.n_layers, dual_path=True)
    heldout = list(heldout) if heldout is not None else list(episodes)

    params = init_params(channel_map, out_channels=out_channels, seed=cfg.seed)
    best = params
    best_loss = _heldout_loss(heldout, params, cfg.dice_mix)
    best_step = 0

    log: list[tuple[int, float, float, float, float]] = []
    step = 0
    for _ in range(cfg.epochs):
        for start in range(0, len(episodes), cfg.batch):
            batch = episodes[start : start + cfg.batch]
            acc_w = np.zeros_like(params.reduction.weights)
            acc_b = np.zeros_like(params.reduction.bias)
            acc_u = np.zeros_like(params.readout_w)
            acc_c = 0.0
            ce_sum = dice_sum = total_sum = 0.0
            for ep in batch:
                total, ce, dice, grads = episode_loss_and_grads(ep, params, cfg.dice_mix)
                if not np.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                acc_w += grads.reduction_w
                acc_b += grads.reduction_bias
                acc_u += grads.readout_w
                acc_c += grads.readout_b
                ce_sum += ce
                dice_sum += dice
                total_sum += total
            scale = cfg.learning_rate / len(batch)
            new_weights = params.reduction.weights - scale * acc_w
            new_bias = params.reduction.bias - scale * acc_b
            new_readout = params.readout_w - scale * acc_u
            new_readout_b = params.readout_b - scale * acc_c
            if not (
                np.isfinite(new_weights).all()
                and np.isfinite(new_bias).all()
                and np.isfinite(new_readout).all()
                and np.isfinite(new_readout_b)
            ):
                raise TrainingDiverged(f"non-finite parameter update at step {step}")
            params = ToyHeadParams(
                reduction=ReductionWeights(
                    weights=new_weights, bias=new_bias, channel_map=channel_map
                ),
                readout_w=new_readout,
                readout_b=new_readout_b,
            )
            step += 1
            held_loss = _heldout_loss(heldout, params, cfg.dice_mix)
            held_miou = head_miou(heldout, params)
            if not np.isfinite(held_loss):
                raise TrainingDiverged(f"non-finite held-out loss at step {step}")
            log.append(
                (step, ce_sum / len(batch), dice_sum / len(batch), total_sum / len(batch), held_miou)
            )
            if held_loss < best_loss:
                best = params
                best_loss = held_loss
                best_step = step
    return TrainResult(params=best, log=tuple(log), best_step=best_step, best_heldout_loss=best_loss)


def _heldout_loss(episodes: Sequence[EpisodeBundle], params: ToyHeadParams, dice_mix: float) -> float:
    return float(np.mean([episode_loss(ep, params, dice_mix)[0] for ep in episodes]))


# Serialization -------------------------------------------------------------

def save_params(stem: str | Path, params: ToyHeadParams) -> None:
    stem = str(stem)
    save_weights(stem + ".reduction", params.reduction)
    write_tensor(stem + ".readout.fcct", params.readout_w.shape, params.readout_w.astype(np.float32))
    write_tensor(stem + ".readout_bias.fcct", (1,), np.array([params.readout_b], dtype=np.float32))


def load_params(stem: str | Path) -> ToyHeadParams:
    stem = str(stem)
    reduction = load_weights(stem + ".reduction")
    _, readout = read_tensor(stem + ".readout.fcct")
    _, bias = read_tensor(stem + ".readout_bias.fcct")
    return ToyHeadParams(
        reduction=reduction,
        readout_w=readout.astype(np.float64),
        readout_b=float(bias[0]),
    )
