"""Decouple frame embeddings into spatial and temporal features.

Averaging (T, N, D) frame embeddings over time yields the N-token spatial
feature; averaging over patches yields the T-token temporal feature. An
optional non-overlapping window mean over the 2-D patch grid (row-major
patch order, fixed project-wide) compresses the spatial token count.
"""

from __future__ import annotations

from dataclasses import dataclass

from .encoder import FrameEmbeddings
from .tensor import ShapeError, Tensor, mean_axis_fwd


@dataclass
class PooledFeatures:
    spatial_z: Tensor  # (N, D), mean over frames
    temporal_t: Tensor  # (T, D), mean over patches


def temporal_pool(x: FrameEmbeddings) -> Tensor:
    """(T, N, D) -> (N, D): average along the time axis."""
    return Tensor(mean_axis_fwd(x.x.data, 0))


def spatial_pool(x: FrameEmbeddings) -> Tensor:
    """(T, N, D) -> (T, D): average across the patch axis."""
    return Tensor(mean_axis_fwd(x.x.data, 1))


def pool_features(x: FrameEmbeddings) -> PooledFeatures:
    return PooledFeatures(spatial_z=temporal_pool(x), temporal_t=spatial_pool(x))


def window_pool(spatial_z: Tensor, grid_side: int, window: int) -> Tensor:
    """Mean over non-overlapping window x window cells of the patch grid.

    (N, D) with N == grid_side**2 -> ((grid_side/window)**2, D).
    """
    z = spatial_z.data
    if z.ndim != 2 or z.shape[0] != grid_side * grid_side:
        raise ShapeError(
            f"expected ({grid_side * grid_side}, D) tokens for grid {grid_side}, "
            f"got {z.shape}"
        )
    if window < 1 or grid_side % window != 0:
        raise ShapeError(f"window {window} does not divide grid {grid_side}")
    d = z.shape[1]
    out_side = grid_side // window
    grid = z.reshape(grid_side, grid_side, d)
    pooled = grid.reshape(out_side, window, out_side, window, d).mean(axis=(1, 3))
    return Tensor(pooled.reshape(out_side * out_side, d))
