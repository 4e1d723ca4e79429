"""Cross-layer correlation volumes, prior masks, and episodic evaluation
for few-shot segmentation.

The package computes fully connected correlation (FCC) volumes between
every pair of encoder layers of a support/target feature stack and a query
feature stack, fuses the dual-condition concatenation through a learnable
1x1 channel reduction, turns the result into training-free prior masks and
K-shot predictions, and ships a CKA layer-similarity analysis plus an
episodic mIoU evaluation harness with a synthetic episode generator.
"""

from fccseg.episodes import (
    EpisodeBundle,
    EpisodeManifest,
    FeatureSet,
    GridMask,
    Shot,
    downsample_mask,
    load_episode,
    read_manifest,
    write_manifest,
)
from fccseg.tensorfile import TensorFormatError, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "EpisodeBundle",
    "EpisodeManifest",
    "FeatureSet",
    "GridMask",
    "Shot",
    "TensorFormatError",
    "downsample_mask",
    "load_episode",
    "read_manifest",
    "read_tensor",
    "write_manifest",
    "write_tensor",
]
