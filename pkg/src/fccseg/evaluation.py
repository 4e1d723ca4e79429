"""Episodic evaluation harness and synthetic episode generator.

Evaluation runs the full prior-mask pipeline per episode (pattern-selected
correlation volume, optional dual-path concatenation, optional 1x1
reduction, prior scoring, K-shot merge, threshold) and aggregates IoU into
per-fold and overall means.

The synthetic generator builds episodes whose foreground cells carry a
unit class signature confined to a signature channel block and whose
background cells carry a signature from an orthogonal plane of the same
block, so noiseless recovery by the prior pipeline is exact. The signature
rotates deterministically across layers; object-scale changes additionally
shift the shallow-layer rotation (deep layers stay put), which makes
cross-layer channels carry information that same-layer channels lose when
support and query scales differ. Scenario transforms cover scale change,
contiguous occlusion of support foreground, shape change, and the
limited-information composition with support masks below 5% coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fccseg.correlation import (
    SUPPORT_PATH,
    TARGET_PATH,
    build_volume,
    iter_channels,
    layer_pairs,
)
from fccseg.episodes import EpisodeBundle, FeatureSet, GridMask, Shot
from fccseg.reduction import ReductionWeights, reduce_volume
from fccseg.segmentation import (
    ScoreMap,
    kshot_merge,
    prior_score,
    prior_score_streamed,
    threshold_mask,
)
from fccseg.textio import fmt, write_rows_csv

SMALL_SUPPORT_FRACTION = 0.05

# background-signature rotation across the stack, end to end
_ANGLE_SPREAD = 1.2
# layer-index shift of the class signature per unit |log scale|
_SHIFT_GAIN = 4.0


class SynthesisError(ValueError):
    """Raised when a synthetic spec cannot be realized."""


def iou(pred: GridMask, gt: GridMask) -> float:
    """Intersection over union; both-empty masks agree vacuously (1.0)."""
    if (pred.grid_h, pred.grid_w) != (gt.grid_h, gt.grid_w):
        raise ValueError(
            f"extent mismatch: {(pred.grid_h, pred.grid_w)} vs {(gt.grid_h, gt.grid_w)}"
        )
    p = pred.values.astype(bool)
    g = gt.values.astype(bool)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass(frozen=True)
class PipelineConfig:
    """Selects the prior-mask pipeline variant to evaluate."""

    pattern: str = "fully_cross"
    dual_path: bool = True
    weights: ReductionWeights | None = None
    tau: float = 0.5
    k_shots: int | None = None


@dataclass(frozen=True)
class EvalReport:
    """Per-episode IoU with per-fold and overall means."""

    per_episode: tuple[tuple[str, int, float], ...]
    stratum: str = "all"

    def __post_init__(self) -> None:
        for _, _, value in self.per_episode:
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"IoU {value} outside [0, 1]")

    @property
    def episode_count(self) -> int:
        return len(self.per_episode)

    @property
    def overall_miou(self) -> float:
        if not self.per_episode:
            raise ValueError("empty report has no mIoU")
        return float(np.mean([v for _, _, v in self.per_episode]))

    @property
    def per_fold(self) -> dict[int, float]:
        folds: dict[int, list[float]] = {}
        for _, fold, value in self.per_episode:
            folds.setdefault(fold, []).append(value)
        return {f: float(np.mean(vs)) for f, vs in sorted(folds.items())}


def _shot_channels(episode: EpisodeBundle, shot: Shot, cfg: PipelineConfig):
    pairs = layer_pairs(cfg.pattern, episode.query.n_layers)
    sides = [(shot.support_target, TARGET_PATH)]
    if cfg.dual_path:
        sides.append((shot.support_full, SUPPORT_PATH))
    for side, path in sides:
        for _, chan in iter_channels(side, episode.query, pairs, path):
            yield chan


def predict_episode(episode: EpisodeBundle, cfg: PipelineConfig) -> tuple[ScoreMap, GridMask]:
    """Run the prior-mask pipeline on one episode; returns (merged scores, mask)."""
    shots = episode.shots
    if cfg.k_shots is not None:
        if not 1 <= cfg.k_shots <= len(shots):
            raise ValueError(f"k_shots {cfg.k_shots} outside 1..{len(shots)}")
        shots = shots[: cfg.k_shots]
    maps = []
    for shot in shots:
        if cfg.weights is not None:
            vol = build_volume(episode.query, shot, cfg.pattern, cfg.dual_path)
            tensor = reduce_volume(vol, cfg.weights)
            maps.append(prior_score(tensor, shot.support_mask))
        else:
            # streamed: one correlation channel in flight per shot
            maps.append(
                prior_score_streamed(_shot_channels(episode, shot, cfg), shot.support_mask)
            )
    merged = kshot_merge(maps)
    return merged, threshold_mask(merged, cfg.tau)


def evaluate(
    episodes: Iterable[EpisodeBundle],
    cfg: PipelineConfig | None = None,
    stratum: str = "all",
) -> EvalReport:
    """Evaluate the pipeline over episodes; deterministic for a fixed input order."""
    cfg = cfg or PipelineConfig()
    rows = []
    for idx, episode in enumerate(episodes):
        _, pred = predict_episode(episode, cfg)
        rows.append((str(idx), episode.fold_id, iou(pred, episode.query_gt)))
    if not rows:
        raise ValueError("need at least one episode")
    return EvalReport(per_episode=tuple(rows), stratum=stratum)


def stratify_small_support(episodes: Sequence[EpisodeBundle]) -> list[EpisodeBundle]:
    """Episodes whose (first-shot) support foreground covers under 5% of cells."""
    return [
        e
        for e in episodes
        if e.shots[0].support_mask.foreground_fraction() < SMALL_SUPPORT_FRACTION
    ]


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    write_rows_csv(
        path,
        ("episode_id", "fold", "iou"),
        ((eid, fold, value) for eid, fold, value in report.per_episode),
    )


def format_summary(report: EvalReport) -> str:
    """Fold-table text block: one column per fold plus the overall mean."""
    folds = report.per_fold
    header = [f"fold{f}" for f in folds] + ["mIoU"]
    values = [fmt(folds[f]) for f in folds] + [fmt(report.overall_miou)]
    width = 12
    lines = [
        "".join(h.ljust(width) for h in header).rstrip(),
        "".join(v.ljust(width) for v in values).rstrip(),
        f"episodes: {report.episode_count} (stratum: {report.stratum})",
    ]
    return "\n".join(lines) + "\n"


# Synthetic episodes ---------------------------------------------------------

SCENARIOS = ("plain", "scale_diff", "occlusion", "shape_diff", "limited_info")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic episode."""

    grid_h: int = 20
    grid_w: int = 20
    n_layers: int = 12
    channels: int = 24
    signature_dim: int = 18
    noise_sigma: float = 0.1
    scenario: str = "plain"
    scale_ratio: float = 0.5
    occlusion_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise SynthesisError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.grid_h < 4 or self.grid_w < 4:
            raise SynthesisError("grid must be at least 4x4")
        if self.n_layers < 1:
            raise SynthesisError("need at least one layer")
        if not 4 <= self.signature_dim <= self.channels:
            raise SynthesisError(
                "signature_dim must lie in [4, channels]: the foreground and background "
                "signatures each occupy a 2-D rotation plane of the signature block"
            )
        if self.noise_sigma < 0:
            raise SynthesisError("noise_sigma must be >= 0")
        if self.scale_ratio <= 0:
            raise SynthesisError("scale_ratio must be > 0")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise SynthesisError("occlusion_fraction must lie in [0, 1)")


def _layer_shift(scale: float) -> int:
    """Layer-index shift of the class signature induced by an object-scale change."""
    return int(round(_SHIFT_GAIN * np.log(1.0 / scale)))


def _signature_frames(
    rng: np.random.Generator,
    channels: int,
    signature_dim: int,
    count: int,
) -> tuple[np.ndarray, np.ndarray]:
    """A seeded orthonormal frame for class signatures plus the background plane.

    The frame occupies the first signature_dim - 2 channels of the
    signature block; the background plane occupies the last two, so every
    class signature is exactly orthogonal to every background signature.
    """
    frame_dim = signature_dim - 2
    if count > frame_dim:
        raise SynthesisError(
            f"signature_dim {signature_dim} too small: scenario needs {count} frame "
            f"vectors plus a 2-D background plane (signature_dim >= {count + 2})"
        )
    block = rng.standard_normal((frame_dim, count))
    q, r = np.linalg.qr(block)
    q = q * np.sign(np.diag(r))[None, :]
    frames = np.zeros((channels, count))
    frames[:frame_dim, :] = q
    bg_plane = np.zeros((channels, 2))
    bg_plane[frame_dim, 0] = 1.0
    bg_plane[frame_dim + 1, 1] = 1.0
    return frames, bg_plane


def _class_trajectory(frames: np.ndarray, start: int, n_layers: int) -> np.ndarray:
    """Unit class signature per layer: [n_layers, C].

    Layer l blends frame vectors start+l and start+l+1, so signatures of
    adjacent layers overlap (cosine 0.5) while layers two or more apart are
    exactly orthogonal. An object-scale change slides the start index: the
    level of detail each layer carries moves along the frame, which is what
    cross-layer correlation can recover and same-layer correlation cannot.
    """
    idx = start + np.arange(n_layers)
    return (frames[:, idx] + frames[:, idx + 1]).T / np.sqrt(2.0)


def _background_trajectory(bg_plane: np.ndarray, n_layers: int) -> np.ndarray:
    """Background signature rotating inside its own plane across layers."""
    if n_layers == 1:
        angles = np.zeros(1)
    else:
        angles = np.arange(n_layers) * (_ANGLE_SPREAD / (n_layers - 1))
    b0, b1 = bg_plane[:, 0], bg_plane[:, 1]
    return np.cos(angles)[:, None] * b0[None, :] + np.sin(angles)[:, None] * b1[None, :]


def _blob(
    rng: np.random.Generator,
    grid_h: int,
    grid_w: int,
    height: int,
    width: int,
    shape: str,
) -> np.ndarray:
    height = min(max(1, height), grid_h)
    width = min(max(1, width), grid_w)
    top = int(rng.integers(0, grid_h - height + 1))
    left = int(rng.integers(0, grid_w - width + 1))
    mask = np.zeros((grid_h, grid_w), dtype=np.uint8)
    if shape == "rect":
        mask[top : top + height, left : left + width] = 1
    else:  # ellipse
        cy, cx = top + (height - 1) / 2.0, left + (width - 1) / 2.0
        ry, rx = max(height / 2.0, 0.5), max(width / 2.0, 0.5)
        rows, cols = np.indices((grid_h, grid_w))
        inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        mask[inside] = 1
        if mask.sum() == 0:
            mask[top + height // 2, left + width // 2] = 1
    return mask


def _occlude(mask: np.ndarray, fraction: float) -> np.ndarray:
    """Remove a spatially contiguous fraction of foreground, scanning from the top."""
    if fraction <= 0.0:
        return np.zeros_like(mask)
    fg_total = int(mask.sum())
    target = int(np.ceil(fraction * fg_total))
    target = min(target, fg_total - 1)  # keep at least one visible cell
    occluded = np.zeros_like(mask)
    remaining = target
    for r in range(mask.shape[0]):
        if remaining <= 0:
            break
        row_cells = np.flatnonzero(mask[r])
        take = min(remaining, row_cells.size)
        occluded[r, row_cells[:take]] = 1
        remaining -= take
    return occluded


def _paint(
    blob: np.ndarray,
    fg_traj: np.ndarray,
    bg_traj: np.ndarray,
    channels: int,
) -> np.ndarray:
    """[n, C, h, w] stack: per-layer bg signature everywhere, fg signature on the blob."""
    n = fg_traj.shape[0]
    h, w = blob.shape
    flat = np.empty((n, channels, h * w), dtype=np.float64)
    flat[:] = bg_traj[:, :, None]
    fg_idx = np.flatnonzero(blob.reshape(-1))
    flat[:, :, fg_idx] = fg_traj[:, :, None]
    return flat.reshape(n, channels, h, w)


def _rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def synth_episode(spec: SynthSpec, shots: int = 1) -> EpisodeBundle:
    """Generate one episode; bitwise deterministic in (spec, shots).

    All shots share the episode's class signature and blob extents but have
    independent blob placement, occlusion, and noise.
    """
    if shots < 1:
        raise SynthesisError("need at least one shot")
    h, w, n, c = spec.grid_h, spec.grid_w, spec.n_layers, spec.channels
    cells = h * w

    scaled = spec.scenario in ("scale_diff", "limited_info")
    occluded_scenario = spec.scenario in ("occlusion", "limited_info")
    shaped = spec.scenario in ("shape_diff", "limited_info")

    class_rng = _rng_for(spec.seed, 0)

    # canonical object extents for the episode's class
    if spec.scenario == "limited_info":
        max_area = max(2, int(SMALL_SUPPORT_FRACTION * cells) - 1)
        side = max(1, int(np.floor(np.sqrt(max_area))))
        sup_h = int(class_rng.integers(1, side + 1))
        sup_w = max(1, min(max_area // sup_h, w))
        if sup_h * sup_w > max_area:
            raise SynthesisError("limited_info blob cannot satisfy the <5% support budget")
    else:
        sup_h = int(class_rng.integers(max(2, h // 4), max(3, h // 2 + 1)))
        sup_w = int(class_rng.integers(max(2, w // 4), max(3, w // 2 + 1)))

    qry_scale = spec.scale_ratio if scaled else 1.0
    qry_h = max(1, int(round(sup_h * qry_scale)))
    qry_w = max(1, int(round(sup_w * qry_scale)))
    if qry_h > h or qry_w > w:
        raise SynthesisError(f"query blob {qry_h}x{qry_w} does not fit the {h}x{w} grid")

    shift = _layer_shift(qry_scale)
    if abs(shift) > max(0, n - 2):
        raise SynthesisError(
            f"scale_ratio {spec.scale_ratio} shifts the signature by {shift} layers, "
            f"beyond what a {n}-layer stack can recover"
        )
    offset = max(0, -shift)
    frames, bg_plane = _signature_frames(class_rng, c, spec.signature_dim, n + abs(shift) + 1)
    fg_support = _class_trajectory(frames, offset, n)
    fg_query = _class_trajectory(frames, offset + shift, n)
    background = _background_trajectory(bg_plane, n)

    sigma = spec.noise_sigma
    sup_shape = "ellipse" if shaped else "rect"

    query_rng = _rng_for(spec.seed, 1)
    query_blob = _blob(query_rng, h, w, qry_h, qry_w, "rect")
    query_data = _paint(query_blob, fg_query, background, c)
    query_data += sigma * query_rng.standard_normal(query_data.shape)

    shot_list = []
    for k in range(shots):
        shot_rng = _rng_for(spec.seed, 2 + k)
        support_blob = _blob(shot_rng, h, w, sup_h, sup_w, sup_shape)
        support_clean = _paint(support_blob, fg_support, background, c)
        occlusion_blob = (
            _occlude(support_blob, spec.occlusion_fraction)
            if occluded_scenario
            else np.zeros_like(support_blob)
        )
        support_clean[:, :, occlusion_blob.astype(bool)] = 0.0
        support_mask = (support_blob.astype(bool) & ~occlusion_blob.astype(bool)).astype(np.uint8)
        if support_mask.sum() == 0:
            raise SynthesisError("occlusion removed the entire support foreground")

        support_full = support_clean + sigma * shot_rng.standard_normal(support_clean.shape)
        support_target = support_full.copy()
        support_target[:, :, ~support_mask.astype(bool)] = 0.0
        shot_list.append(
            Shot(
                support_full=FeatureSet(support_full.astype(np.float32)),
                support_target=FeatureSet(support_target.astype(np.float32)),
                support_mask=GridMask(support_mask),
            )
        )

    return EpisodeBundle(
        query=FeatureSet(query_data.astype(np.float32)),
        query_gt=GridMask(query_blob),
        shots=tuple(shot_list),
        class_id=f"{spec.scenario}-{spec.seed}",
        fold_id=0,
    )


def episode_seed(base_seed: int, index: int) -> int:
    """Derive a per-episode seed; stable across runs and platforms."""
    seq = np.random.SeedSequence(entropy=base_seed, spawn_key=(1 + index,))
    return int(seq.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


def synth_batch(
    spec: SynthSpec,
    count: int,
    n_folds: int = 4,
    shots: int = 1,
) -> list[EpisodeBundle]:
    """Generate a deterministic batch; episode i gets fold i % n_folds."""
    if count < 1:
        raise SynthesisError("need at least one episode")
    episodes = []
    for i in range(count):
        bundle = synth_episode(replace(spec, seed=episode_seed(spec.seed, i)), shots=shots)
        episodes.append(
            EpisodeBundle(
                query=bundle.query,
                query_gt=bundle.query_gt,
                shots=bundle.shots,
                class_id=bundle.class_id,
                fold_id=i % n_folds,
            )
        )
    return episodes
