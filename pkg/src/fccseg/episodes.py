"""Feature stacks, grid masks, episode bundles, and the on-disk manifest.

A FeatureSet is an n-layer stack of C-channel features on an h x w patch
grid, stored float32. A GridMask is a binary mask on the same grid. An
EpisodeBundle is one few-shot task: query features plus ground truth, and
K support shots, each shot holding the full-support features, the
target features (extracted from the background-suppressed support image),
and the support grid mask.

The manifest is a UTF-8 JSON file listing episodes by file path, with a
header fixing n_layers / channels / grid extents for the whole dataset.
All types are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from fccseg.tensorfile import read_tensor, write_tensor


class ManifestError(ValueError):
    """Raised when a manifest or its referenced files fail validation."""


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class FeatureSet:
    """An n-layer stack of features, indexed [layer, channel, row, col]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ValueError(f"feature data must be 4-D [layer, channel, row, col], got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("feature stack needs at least one layer")
        if not np.isfinite(data).all():
            raise ValueError("feature data contains non-finite values")
        object.__setattr__(self, "data", _freeze(data.astype(np.float32, copy=False)))

    @property
    def n_layers(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def grid_h(self) -> int:
        return self.data.shape[2]

    @property
    def grid_w(self) -> int:
        return self.data.shape[3]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def layer(self, index: int) -> np.ndarray:
        """One layer as [channel, row, col]."""
        return self.data[index]


@dataclass(frozen=True)
class GridMask:
    """A binary {0,1} mask on the patch grid."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        if values.size == 0:
            raise ValueError("mask must not be empty")
        uniq = np.unique(values)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError("mask values must be strictly binary")
        object.__setattr__(self, "values", _freeze(values.astype(np.uint8, copy=False)))

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def foreground_count(self) -> int:
        return int(self.values.sum())

    def foreground_fraction(self) -> float:
        return self.foreground_count() / self.values.size


@dataclass(frozen=True)
class Shot:
    """One support example: full features, target features, grid mask."""

    support_full: FeatureSet
    support_target: FeatureSet
    support_mask: GridMask


@dataclass(frozen=True)
class EpisodeBundle:
    """One few-shot episode, fully validated at construction."""

    query: FeatureSet
    query_gt: GridMask
    shots: tuple[Shot, ...]
    class_id: str = ""
    fold_id: int = 0

    def __post_init__(self) -> None:
        if len(self.shots) < 1:
            raise ValueError("episode needs >= 1 shot")
        object.__setattr__(self, "shots", tuple(self.shots))
        ref = self.query
        if (self.query_gt.grid_h, self.query_gt.grid_w) != ref.grid:
            raise ValueError("query mask extents do not match query features")
        for k, shot in enumerate(self.shots):
            for role, fs in (("support_full", shot.support_full), ("support_target", shot.support_target)):
                if fs.n_layers != ref.n_layers:
                    raise ValueError(f"shot {k} {role}: n_layers {fs.n_layers} != query {ref.n_layers}")
                if fs.channels != ref.channels:
                    raise ValueError(f"shot {k} {role}: channels {fs.channels} != query {ref.channels}")
            if shot.support_full.grid != shot.support_target.grid:
                raise ValueError(f"shot {k}: support_full and support_target grids differ")
            if (shot.support_mask.grid_h, shot.support_mask.grid_w) != shot.support_full.grid:
                raise ValueError(f"shot {k}: mask extents do not match support features")

    @property
    def n_shots(self) -> int:
        return len(self.shots)


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> GridMask:
    """Pool a full-resolution binary mask onto the patch grid.

    A grid cell is foreground iff the mean coverage of its pixel block is
    >= 0.5; a tie at exactly 0.5 counts as foreground. The divisible case
    (H = grid_h * patch) pools exact pixel blocks; otherwise pixels are
    assigned to cells by nearest-index binning.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid extents must be >= 1")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    full_h, full_w = mask.shape
    if full_h < grid_h or full_w < grid_w:
        raise ValueError(f"mask {mask.shape} smaller than grid ({grid_h}, {grid_w})")
    uniq = np.unique(mask)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError("mask values must be strictly binary")

    rows = (np.arange(full_h) * grid_h) // full_h
    cols = (np.arange(full_w) * grid_w) // full_w
    coverage = np.zeros((grid_h, grid_w), dtype=np.float64)
    counts = np.zeros((grid_h, grid_w), dtype=np.int64)
    np.add.at(coverage, (rows[:, None], cols[None, :]), mask.astype(np.float64))
    np.add.at(counts, (rows[:, None], cols[None, :]), 1)
    return GridMask((coverage / counts >= 0.5).astype(np.uint8))


# Manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ShotRecord:
    support_features: str
    target_features: str
    support_mask: str


@dataclass(frozen=True)
class EpisodeRecord:
    query_features: str
    query_mask: str
    shots: tuple[ShotRecord, ...]
    class_id: str = ""
    fold_id: int = 0


@dataclass(frozen=True)
class EpisodeManifest:
    """Dataset header plus one record per episode; paths are relative to base_dir."""

    n_layers: int
    channels: int
    grid_h: int
    grid_w: int
    episodes: tuple[EpisodeRecord, ...]
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.episodes)


def write_manifest(path: str | Path, manifest: EpisodeManifest) -> None:
    doc = {
        "n_layers": manifest.n_layers,
        "channels": manifest.channels,
        "grid_h": manifest.grid_h,
        "grid_w": manifest.grid_w,
        "episodes": [
            {
                "query_features": ep.query_features,
                "query_mask": ep.query_mask,
                "shots": [
                    {
                        "support_features": s.support_features,
                        "target_features": s.target_features,
                        "support_mask": s.support_mask,
                    }
                    for s in ep.shots
                ],
                "class_id": ep.class_id,
                "fold_id": ep.fold_id,
            }
            for ep in manifest.episodes
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> EpisodeManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc

    try:
        episodes = tuple(
            EpisodeRecord(
                query_features=str(ep["query_features"]),
                query_mask=str(ep["query_mask"]),
                shots=tuple(
                    ShotRecord(
                        support_features=str(s["support_features"]),
                        target_features=str(s["target_features"]),
                        support_mask=str(s["support_mask"]),
                    )
                    for s in ep["shots"]
                ),
                class_id=str(ep.get("class_id", "")),
                fold_id=int(ep.get("fold_id", 0)),
            )
            for ep in doc["episodes"]
        )
        manifest = EpisodeManifest(
            n_layers=int(doc["n_layers"]),
            channels=int(doc["channels"]),
            grid_h=int(doc["grid_h"]),
            grid_w=int(doc["grid_w"]),
            episodes=episodes,
            base_dir=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: missing or malformed field: {exc}") from exc
    return manifest


def _load_features(base: Path, rel: str, manifest: EpisodeManifest, role: str) -> FeatureSet:
    dims, data = read_tensor(base / rel)
    if len(dims) != 4:
        raise ManifestError(f"{role} {rel}: expected rank-4 feature tensor, got dims {dims}")
    fs = FeatureSet(data)
    if fs.n_layers != manifest.n_layers:
        raise ManifestError(f"{role} {rel}: n_layers {fs.n_layers} != manifest {manifest.n_layers}")
    if fs.channels != manifest.channels:
        raise ManifestError(f"{role} {rel}: channels {fs.channels} != manifest {manifest.channels}")
    if fs.grid != (manifest.grid_h, manifest.grid_w):
        raise ManifestError(f"{role} {rel}: grid {fs.grid} != manifest ({manifest.grid_h}, {manifest.grid_w})")
    return fs


def _load_mask(base: Path, rel: str, manifest: EpisodeManifest, role: str) -> GridMask:
    dims, data = read_tensor(base / rel)
    if len(dims) != 2:
        raise ManifestError(f"{role} {rel}: expected rank-2 mask tensor, got dims {dims}")
    try:
        mask = GridMask(data)
    except ValueError as exc:
        raise ManifestError(f"{role} {rel}: {exc}") from exc
    if (mask.grid_h, mask.grid_w) != (manifest.grid_h, manifest.grid_w):
        raise ManifestError(f"{role} {rel}: extents do not match manifest grid")
    return mask


def load_episode(manifest: EpisodeManifest, index: int) -> EpisodeBundle:
    """Load and fully validate one episode from a manifest."""
    if not 0 <= index < len(manifest.episodes):
        raise IndexError(f"episode index {index} out of range (manifest has {len(manifest.episodes)})")
    record = manifest.episodes[index]
    if len(record.shots) < 1:
        raise ManifestError(f"episode {index}: >= 1 shot required")
    base = manifest.base_dir

    query = _load_features(base, record.query_features, manifest, "query_features")
    query_gt = _load_mask(base, record.query_mask, manifest, "query_mask")
    shots = []
    for k, s in enumerate(record.shots):
        shots.append(
            Shot(
                support_full=_load_features(base, s.support_features, manifest, f"shot {k} support_features"),
                support_target=_load_features(base, s.target_features, manifest, f"shot {k} target_features"),
                support_mask=_load_mask(base, s.support_mask, manifest, f"shot {k} support_mask"),
            )
        )
    try:
        return EpisodeBundle(
            query=query,
            query_gt=query_gt,
            shots=tuple(shots),
            class_id=record.class_id,
            fold_id=record.fold_id,
        )
    except ValueError as exc:
        raise ManifestError(f"episode {index}: {exc}") from exc


def iter_episodes(manifest: EpisodeManifest) -> Iterator[EpisodeBundle]:
    for i in range(len(manifest.episodes)):
        yield load_episode(manifest, i)


def save_episode_files(
    out_dir: str | Path,
    stem: str,
    bundle: EpisodeBundle,
) -> EpisodeRecord:
    """Write one episode's tensors under out_dir and return its manifest record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def _features(name: str, fs: FeatureSet) -> str:
        rel = f"{stem}.{name}.fcct"
        write_tensor(out / rel, fs.data.shape, fs.data)
        return rel

    def _mask(name: str, mask: GridMask) -> str:
        rel = f"{stem}.{name}.fcct"
        write_tensor(out / rel, mask.values.shape, mask.values)
        return rel

    shots = []
    for k, shot in enumerate(bundle.shots):
        shots.append(
            ShotRecord(
                support_features=_features(f"shot{k}.support", shot.support_full),
                target_features=_features(f"shot{k}.target", shot.support_target),
                support_mask=_mask(f"shot{k}.mask", shot.support_mask),
            )
        )
    return EpisodeRecord(
        query_features=_features("query", bundle.query),
        query_mask=_mask("query_gt", bundle.query_gt),
        shots=tuple(shots),
        class_id=bundle.class_id,
        fold_id=bundle.fold_id,
    )


def save_manifest_bundle(
    out_dir: str | Path,
    bundles: Sequence[EpisodeBundle],
    manifest_name: str = "manifest.json",
) -> Path:
    """Write a list of episodes plus their manifest; returns the manifest path."""
    if not bundles:
        raise ValueError("need at least one episode")
    ref = bundles[0].query
    records = [save_episode_files(out_dir, f"ep{idx:04d}", b) for idx, b in enumerate(bundles)]
    manifest = EpisodeManifest(
        n_layers=ref.n_layers,
        channels=ref.channels,
        grid_h=ref.grid_h,
        grid_w=ref.grid_w,
        episodes=tuple(records),
        base_dir=Path(out_dir),
    )
    manifest_path = Path(out_dir) / manifest_name
    write_manifest(manifest_path, manifest)
    return manifest_path
