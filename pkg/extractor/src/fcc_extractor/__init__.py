"""Feature extraction for the fccseg correlation engine.

Runs a DINOv2 ViT-B/14 backbone over images, collects all 12
intermediate-layer patch-token grids, applies support-mask suppression in
image space, and serializes everything in the engine's tensor format.
The only coupling to the engine is the byte layout of the files.
"""

from fcc_extractor.backbone import BackboneUnavailable, DinoV2Backbone, ToyBackbone, get_backbone
from fcc_extractor.extract import ExtractJob, downsample_to_grid, extract, extract_masked
from fcc_extractor.manifest import build_manifest

__version__ = "0.1.0"

__all__ = [
    "BackboneUnavailable",
    "DinoV2Backbone",
    "ExtractJob",
    "ToyBackbone",
    "build_manifest",
    "downsample_to_grid",
    "extract",
    "extract_masked",
    "get_backbone",
]
