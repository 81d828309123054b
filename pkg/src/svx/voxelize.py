"""Point-cloud voxelization onto the stride-1 sparse grid."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFrameWarning, ShapeMismatch
from .sparse import SparseTensor, _tensor, linear_keys

# mean (dx, dy, dz to voxel center), mean intensity, count / (count + 1)
FEATURE_CHANNELS = 5


@dataclass(frozen=True)
class GridConfig:
    """Voxelization geometry: metric axis ranges and voxel sizes."""

    range_min: tuple[float, float, float] = (-54.0, -54.0, -5.0)
    range_max: tuple[float, float, float] = (54.0, 54.0, 3.0)
    voxel_size: tuple[float, float, float] = (0.075, 0.075, 0.2)

    def __post_init__(self):
        for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size):
            if not hi > lo:
                raise ValueError(f"range_max must exceed range_min, got [{lo}, {hi}]")
            if not vs > 0:
                raise ValueError(f"voxel_size must be positive, got {vs}")

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(
            math.ceil((hi - lo) / vs)
            for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size)
        )


@dataclass(frozen=True)
class PointCloud:
    """One LIDAR sweep: (x, y, z, intensity) rows plus frame metadata."""

    points: np.ndarray          # (N, 4+) float32
    timestamp: float = 0.0
    frame_id: int = 0

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] < 4:
            raise ShapeMismatch(f"points must be (N, 4+), got shape {pts.shape}")
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def clip_mask(points: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Half-open range filter: range_min <= p < range_max on every axis."""
    xyz = points[:, :3].astype(np.float64)
    lo = np.asarray(grid.range_min)
    hi = np.asarray(grid.range_max)
    return np.all((xyz >= lo) & (xyz < hi), axis=1)


def voxelize(pc: PointCloud, grid: GridConfig) -> SparseTensor:
    """Bin points into voxels and encode each occupied voxel as the mean of
    its points' offsets to the voxel center plus intensity, concatenated with
    a bounded count channel count/(count+1).

    Points are sorted within each voxel by (x, y, z, intensity) before
    averaging, so any permutation of the input yields a bit-identical
    tensor. Emits EmptyFrameWarning (not an error) when nothing survives the
    range clip.
    """
    extent = grid.extent
    if pc.num_points == 0:
        warnings.warn("frame has no points inside the grid range", EmptyFrameWarning)
        return _tensor(np.zeros((0, 3)), np.zeros((0, FEATURE_CHANNELS)), 1, extent)

    kept = pc.points[clip_mask(pc.points, grid)]
    if kept.shape[0] == 0:
        warnings.warn("frame has no points inside the grid range", EmptyFrameWarning)
        return _tensor(np.zeros((0, 3)), np.zeros((0, FEATURE_CHANNELS)), 1, extent)

    xyz = kept[:, :3].astype(np.float64)
    lo = np.asarray(grid.range_min)
    vs = np.asarray(grid.voxel_size)
    bins = np.floor((xyz - lo) / vs).astype(np.int64)
    # in-range points can still round onto the upper boundary bin
    np.clip(bins, 0, np.asarray(extent, dtype=np.int64) - 1, out=bins)

    keys = linear_keys(bins, extent)
    order = np.lexsort((kept[:, 3], kept[:, 2], kept[:, 1], kept[:, 0], keys))
    skeys = keys[order]
    sbins = bins[order]
    centers = lo + (sbins + 0.5) * vs
    per_point = np.concatenate(
        [(xyz[order] - centers).astype(np.float32), kept[order, 3:4]], axis=1
    )

    starts = np.flatnonzero(np.concatenate(([True], skeys[1:] != skeys[:-1])))
    counts = np.diff(np.concatenate((starts, [skeys.shape[0]]))).astype(np.float32)
    sums = np.add.reduceat(per_point, starts, axis=0)
    means = sums / counts[:, None]
    count_channel = (counts / (counts + 1.0))[:, None]
    feats = np.concatenate([means, count_channel], axis=1).astype(np.float32)
    return _tensor(sbins[starts], feats, 1, extent)
