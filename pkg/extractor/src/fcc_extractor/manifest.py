"""Manifest generation from an on-disk episode layout.

Expected convention, one directory per episode (or a single episode
directory passed directly):

    <episode>/
      query/features.fcct      query features [n_layers, C, h, w]
      query/mask.fcct          query ground-truth grid mask [h, w]
      supports/shot<k>.support.fcct
      supports/shot<k>.target.fcct
      masks/shot<k>.mask.fcct
      meta.json                optional {"class_id": ..., "fold_id": ...}

The emitted manifest is the JSON document the engine consumes, with
paths relative to the manifest location.
"""

from __future__ import annotations

import json
import re
from pathlib import Path


def _episode_dirs(root: Path) -> list[Path]:
    if (root / "query").is_dir():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "query").is_dir())
    if not dirs:
        raise FileNotFoundError(f"{root}: no episode directories (expected <episode>/query/)")
    return dirs


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def _scan_episode(episode_dir: Path, root: Path) -> dict:
    query_features = _require(episode_dir / "query" / "features.fcct")
    query_mask = _require(episode_dir / "query" / "mask.fcct")

    supports_dir = episode_dir / "supports"
    if not supports_dir.is_dir():
        raise FileNotFoundError(f"missing directory: {supports_dir}")
    shot_ids = sorted(
        int(m.group(1))
        for m in (
            re.fullmatch(r"shot(\d+)\.support\.fcct", p.name) for p in supports_dir.iterdir()
        )
        if m
    )
    if not shot_ids:
        raise FileNotFoundError(f"{supports_dir}: no shot<k>.support.fcct files")

    shots = []
    for k in shot_ids:
        shots.append(
            {
                "support_features": str(
                    _require(supports_dir / f"shot{k}.support.fcct").relative_to(root)
                ),
                "target_features": str(
                    _require(supports_dir / f"shot{k}.target.fcct").relative_to(root)
                ),
                "support_mask": str(
                    _require(episode_dir / "masks" / f"shot{k}.mask.fcct").relative_to(root)
                ),
            }
        )

    meta = {}
    meta_path = episode_dir / "meta.json"
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return {
        "query_features": str(query_features.relative_to(root)),
        "query_mask": str(query_mask.relative_to(root)),
        "shots": shots,
        "class_id": str(meta.get("class_id", episode_dir.name)),
        "fold_id": int(meta.get("fold_id", 0)),
    }


def build_manifest(root: str | Path, out: str | Path | None = None) -> Path:
    """Scan an episode layout and write the manifest; returns its path."""
    from fcc_extractor.tensor_format import read_dims

    root = Path(root)
    episodes = [_scan_episode(d, root) for d in _episode_dirs(root)]

    header_dims = read_dims(root / episodes[0]["query_features"])
    if len(header_dims) != 4:
        raise ValueError(
            f"{episodes[0]['query_features']}: expected rank-4 features, got dims {header_dims}"
        )
    n_layers, channels, grid_h, grid_w = header_dims

    doc = {
        "n_layers": n_layers,
        "channels": channels,
        "grid_h": grid_h,
        "grid_w": grid_w,
        "episodes": episodes,
    }
    out_path = Path(out) if out is not None else root / "manifest.json"
    out_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return out_path
