"""Image loading, support-mask suppression, and feature-file emission.

Masking happens in image space before the backbone: the mask is resized
to the image extents with nearest-neighbor (which keeps a binary mask
binary) and multiplied into the pixels, so background regions become
black rather than being zeroed in feature space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fcc_extractor.backbone import PATCH
from fcc_extractor.tensor_format import write_tensor


@dataclass(frozen=True)
class ExtractJob:
    image: Path
    out: Path
    mask: Path | None = None
    side: int = 420

    def __post_init__(self) -> None:
        if self.side < PATCH or self.side % PATCH != 0:
            raise ValueError(f"side length must be a positive multiple of {PATCH}, got {self.side}")


def load_image(path: str | Path, side: int) -> np.ndarray:
    """Decode, resize to side x side, scale to [0, 1] float32 [H, W, 3]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((side, side), Image.BILINEAR)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.float32) / 255.0


def load_mask(path: str | Path, side: int) -> np.ndarray:
    """Decode a mask, nearest-neighbor resize to side x side, binarize to {0, 1}."""
    try:
        with Image.open(path) as img:
            gray = img.convert("L").resize((side, side), Image.NEAREST)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot decode mask {path}: {exc}") from exc
    return (np.asarray(gray) != 0).astype(np.float32)


def extract(job: ExtractJob, backbone) -> Path:
    """Run the backbone on the (unmasked) image; write [12, 768, side/14, side/14]."""
    image = load_image(job.image, job.side)
    features = backbone.layer_grids(image)
    write_tensor(job.out, features.shape, features)
    return Path(job.out)


def extract_masked(job: ExtractJob, backbone) -> Path:
    """Suppress the background in image space, then extract."""
    if job.mask is None:
        raise ValueError("extract_masked needs a mask path")
    image = load_image(job.image, job.side)
    mask = load_mask(job.mask, job.side)
    features = backbone.layer_grids(image * mask[:, :, None])
    write_tensor(job.out, features.shape, features)
    return Path(job.out)


def downsample_to_grid(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Pool a full-resolution binary mask to the patch grid (coverage >= 0.5, ties up)."""
    full_h, full_w = mask.shape
    if full_h < grid_h or full_w < grid_w:
        raise ValueError(f"mask {mask.shape} smaller than grid ({grid_h}, {grid_w})")
    rows = (np.arange(full_h) * grid_h) // full_h
    cols = (np.arange(full_w) * grid_w) // full_w
    coverage = np.zeros((grid_h, grid_w), dtype=np.float64)
    counts = np.zeros((grid_h, grid_w), dtype=np.int64)
    np.add.at(coverage, (rows[:, None], cols[None, :]), mask.astype(np.float64))
    np.add.at(counts, (rows[:, None], cols[None, :]), 1)
    return (coverage / counts >= 0.5).astype(np.uint8)


def write_grid_mask(mask_path: str | Path, out: str | Path, side: int) -> Path:
    """Decode a mask image and store its patch-grid version as a u8 tensor."""
    mask = load_mask(mask_path, side)
    grid = downsample_to_grid(mask, side // PATCH, side // PATCH)
    write_tensor(out, grid.shape, grid)
    return Path(out)
