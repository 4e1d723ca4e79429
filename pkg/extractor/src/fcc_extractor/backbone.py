"""Backbones that map an RGB image to 12 layers of 768-channel patch grids.

DinoV2Backbone wraps the real DINOv2 ViT-B/14 through transformers; it
raises BackboneUnavailable when the library or the weights cannot be
loaded (e.g. offline). ToyBackbone is a deterministic pure-numpy stand-in
with the same geometry (12 layers, 768 channels, patch 14) used in tests
and for smoke runs; it is not a vision model.
"""

from __future__ import annotations

import numpy as np

PATCH = 14
N_LAYERS = 12
CHANNELS = 768

# ImageNet statistics used by the DINOv2 preprocessor
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class BackboneUnavailable(RuntimeError):
    """The requested backbone cannot be loaded in this environment."""


class ToyBackbone:
    """Seeded random patch projection with per-layer affine mixing.

    Deterministic: the same image always yields byte-identical features.
    """

    name = "toy"
    n_layers = N_LAYERS
    channels = CHANNELS
    patch = PATCH

    def __init__(self, seed: int = 715):
        rng = np.random.default_rng(seed)
        in_dim = PATCH * PATCH * 3
        self._projection = rng.standard_normal((CHANNELS, in_dim)) / np.sqrt(in_dim)
        self._layer_scale = rng.uniform(0.5, 1.5, size=(N_LAYERS, CHANNELS))
        self._layer_shift = rng.uniform(-0.5, 0.5, size=(N_LAYERS, CHANNELS))

    def layer_grids(self, image: np.ndarray) -> np.ndarray:
        h_pix, w_pix, _ = image.shape
        grid_h, grid_w = h_pix // PATCH, w_pix // PATCH
        patches = (
            image[: grid_h * PATCH, : grid_w * PATCH]
            .reshape(grid_h, PATCH, grid_w, PATCH, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid_h * grid_w, PATCH * PATCH * 3)
            .astype(np.float64)
        )
        base = patches @ self._projection.T  # [cells, C]
        out = np.empty((N_LAYERS, CHANNELS, grid_h, grid_w), dtype=np.float32)
        for layer in range(N_LAYERS):
            mixed = np.tanh(base * self._layer_scale[layer] + self._layer_shift[layer])
            out[layer] = mixed.T.reshape(CHANNELS, grid_h, grid_w)
        return out


class DinoV2Backbone:
    """DINOv2 ViT-B/14 via transformers; patch tokens only, class token dropped."""

    name = "dinov2"
    n_layers = N_LAYERS
    channels = CHANNELS
    patch = PATCH

    def __init__(self, model_name: str = "facebook/dinov2-base"):
        try:
            import torch  # noqa: F401
            from transformers import AutoModel
        except Exception as exc:
            raise BackboneUnavailable(f"torch/transformers not importable: {exc}") from exc
        try:
            self._model = AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise BackboneUnavailable(f"cannot load {model_name}: {exc}") from exc
        self._model.eval()

    def layer_grids(self, image: np.ndarray) -> np.ndarray:
        import torch

        h_pix, w_pix, _ = image.shape
        grid_h, grid_w = h_pix // PATCH, w_pix // PATCH
        pixels = (image - _MEAN) / _STD
        tensor = torch.from_numpy(pixels.transpose(2, 0, 1)[None].copy())
        with torch.no_grad():
            output = self._model(pixel_values=tensor, output_hidden_states=True)
        # hidden_states[0] is the embedding layer; take the 12 block outputs
        layers = output.hidden_states[1:]
        out = np.empty((N_LAYERS, CHANNELS, grid_h, grid_w), dtype=np.float32)
        for idx, hidden in enumerate(layers):
            tokens = hidden[0, 1:, :].numpy()  # drop the class token
            out[idx] = tokens.reshape(grid_h, grid_w, CHANNELS).transpose(2, 0, 1)
        return out


def get_backbone(name: str, model_name: str | None = None):
    if name == "toy":
        return ToyBackbone()
    if name == "dinov2":
        return DinoV2Backbone(model_name or "facebook/dinov2-base")
    raise ValueError(f"unknown backbone {name!r}; choose 'dinov2' or 'toy'")
