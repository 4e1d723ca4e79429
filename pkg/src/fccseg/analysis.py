"""Linear centered kernel alignment between layer stacks.

CKA measures how similar two representations of the same tokens are,
independent of orthogonal transformation and isotropic scaling. The
feature-space form is used here:

    cka(X, Y) = ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F)

with column-mean-centered Xc, Yc. A layer heatmap evaluates this for
every (layer of A, layer of B) pair, with tokens taken from the whole
patch grid or restricted to mask foreground.
"""

from __future__ import annotations

import numpy as np

from fccseg import runtime
from fccseg.episodes import FeatureSet, GridMask


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between token matrices [N, C] and [N, C'], in [0, 1].

    Degenerate inputs (either matrix constant across tokens) return 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("token matrices must be 2-D [tokens, channels]")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"token-count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 tokens")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    with runtime.compute_limits():
        cross = np.linalg.norm(yc.T @ xc) ** 2
        norm_x = np.linalg.norm(xc.T @ xc)
        norm_y = np.linalg.norm(yc.T @ yc)
    denom = norm_x * norm_y
    if denom == 0.0:
        return 0.0
    return float(cross / denom)


def _tokens(features: FeatureSet, layer: int, fg: np.ndarray | None) -> np.ndarray:
    # [C, h, w] -> [tokens, C], row-major over the grid
    mat = features.layer(layer).reshape(features.channels, -1).T.astype(np.float64)
    if fg is not None:
        mat = mat[fg]
    return mat


def cka_heatmap(
    a: FeatureSet,
    b: FeatureSet,
    mask: GridMask | None = None,
) -> np.ndarray:
    """Layer-pair CKA matrix [a.n_layers, b.n_layers].

    With a mask, tokens are restricted to foreground cells (at least 2
    required); both stacks must live on the same grid.
    """
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    fg = None
    if mask is not None:
        if (mask.grid_h, mask.grid_w) != a.grid:
            raise ValueError("mask extents do not match feature grid")
        fg = np.flatnonzero(mask.values.reshape(-1) == 1)
        if fg.size < 2:
            raise ValueError("need at least 2 foreground tokens for masked CKA")
    out = np.zeros((a.n_layers, b.n_layers), dtype=np.float64)
    tokens_a = [_tokens(a, i, fg) for i in range(a.n_layers)]
    tokens_b = [_tokens(b, j, fg) for j in range(b.n_layers)]
    for i in range(a.n_layers):
        for j in range(b.n_layers):
            out[i, j] = cka(tokens_a[i], tokens_b[j])
    return out
