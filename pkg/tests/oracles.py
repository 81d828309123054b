"""Independent reference implementations used as test oracles.

Nothing here calls the engine's sparse kernels: dense grids, O(N^2) scans,
and scalar loops only, so every comparison is a genuine dual-route check.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from svx.sparse import SparseTensor, _tensor


# ---------------------------------------------------------------- tensors

def random_tensor(rng, extent, n_sites, channels, stride=1) -> SparseTensor:
    """Random sparse tensor with unique in-bounds coordinates."""
    extent = tuple(extent)
    dims = len(extent)
    total = int(np.prod(extent))
    n = min(n_sites, total)
    flat = np.sort(rng.choice(total, size=n, replace=False))
    coords = np.empty((n, dims), dtype=np.int64)
    rem = flat
    for axis in range(dims - 1):
        coords[:, axis] = rem % extent[axis]
        rem = rem // extent[axis]
    coords[:, dims - 1] = rem
    feats = rng.normal(0, 1, size=(n, channels)).astype(np.float32)
    return _tensor(coords, feats, stride, extent)


def densify(t: SparseTensor) -> np.ndarray:
    """Dense (extent..., C) float64 grid of a sparse tensor."""
    grid = np.zeros(t.extent + (t.num_channels,), dtype=np.float64)
    for row in range(t.num_sites):
        grid[tuple(t.coords[row])] = t.features[row]
    return grid


def _shift_slices(shape, off, scatter):
    """Slices implementing out[p] += in[p+off] (gather) or
    out[p+off] += in[p] (scatter)."""
    dst, src = [], []
    for s, o in zip(shape, off):
        o = int(o)
        a = slice(max(0, -o), min(s, s - o))
        b = slice(max(0, o), min(s, s + o))
        if scatter:
            dst.append(b)
            src.append(a)
        else:
            dst.append(a)
            src.append(b)
    return tuple(dst), tuple(src)


def dense_submanifold(dense, weights, bias) -> np.ndarray:
    """out[p] = bias + sum_o W[o] . dense[p + o], zero padded."""
    k = weights.shape[0]
    dims = weights.ndim - 2
    r = k // 2
    shape = dense.shape[:-1]
    out = np.zeros(shape + (weights.shape[-1],), dtype=np.float64)
    for idx in np.ndindex(*([k] * dims)):
        off = np.asarray(idx) - r
        dst, src = _shift_slices(shape, off, scatter=False)
        out[dst] += dense[src] @ weights[idx].astype(np.float64)
    return out + bias.astype(np.float64)


def dense_strided_scatter(dense, weights, bias):
    """Dense reference of the stride-2 scatter convolution.

    Full-resolution scatter c[q + o] += W[o] . dense[q], then a 2-cell block
    sum onto the halved grid. Returns (features grid, occupancy mask) at the
    output resolution, bias added at occupied cells only.
    """
    k = weights.shape[0]
    dims = weights.ndim - 2
    r = k // 2
    shape = dense.shape[:-1]
    cout = weights.shape[-1]
    full = np.zeros(shape + (cout,), dtype=np.float64)
    occ_full = np.zeros(shape, dtype=bool)
    occupied = np.abs(dense).sum(axis=-1) > 0
    for idx in np.ndindex(*([k] * dims)):
        off = np.asarray(idx) - r
        dst, src = _shift_slices(shape, off, scatter=True)
        full[dst] += dense[src] @ weights[idx].astype(np.float64)
        occ_full[dst] |= occupied[src]
    out_shape = tuple((s + 1) // 2 for s in shape)
    pad = [(0, 2 * o - s) for s, o in zip(shape, out_shape)] + [(0, 0)]
    full = np.pad(full, pad)
    occ_full = np.pad(occ_full, pad[:-1])
    if dims == 3:
        x, y, z = out_shape
        feats = full.reshape(x, 2, y, 2, z, 2, cout).sum(axis=(1, 3, 5))
        occ = occ_full.reshape(x, 2, y, 2, z, 2).any(axis=(1, 3, 5))
    else:
        x, y = out_shape
        feats = full.reshape(x, 2, y, 2, cout).sum(axis=(1, 3))
        occ = occ_full.reshape(x, 2, y, 2).any(axis=(1, 3))
    feats[occ] += bias.astype(np.float64)
    return feats, occ


def dilation_keep_count(n: int, ratio: float) -> int:
    """Exact ceil((1 - ratio) * n) using rational arithmetic."""
    return math.ceil((1 - Fraction(str(ratio))) * n)


def brute_dilation_rows(features, ratio) -> set[int]:
    """Top rows by channel-mean |feature|, ties to the lower row index."""
    mags = np.abs(features).mean(axis=1)
    order = sorted(range(len(mags)), key=lambda i: (-mags[i], i))
    return set(order[: dilation_keep_count(len(mags), ratio)])


def brute_strided_pruned(t: SparseTensor, weights, bias, ratio, drop=False):
    """Scalar-loop stride-2 conv with dilation pruning.

    Returns dict (output coord tuple) -> float64 feature vector.
    """
    k = weights.shape[0]
    r = k // 2
    selected = brute_dilation_rows(t.features, ratio)
    acc: dict[tuple, np.ndarray] = {}
    cout = weights.shape[-1]
    for idx in np.ndindex(*([k] * t.dims)):
        off = np.asarray(idx) - r
        center = not off.any()
        w = weights[idx].astype(np.float64)
        for row in range(t.num_sites):
            if row not in selected and not (center and not drop):
                continue
            q = t.coords[row] + off
            if np.any(q < 0) or np.any(q >= t.extent):
                continue
            key = tuple(int(v) for v in q // 2)
            acc.setdefault(key, np.zeros(cout)).__iadd__(
                t.features[row].astype(np.float64) @ w)
    for key in acc:
        acc[key] = acc[key] + bias.astype(np.float64)
    return acc


def brute_local_argmax(coords, scores, kernel_size) -> set[tuple]:
    """Keep p iff no active window neighbour beats it (ties: earlier row)."""
    r = kernel_size // 2
    keep = set()
    n = len(coords)
    for i in range(n):
        beaten = False
        for j in range(n):
            if i == j:
                continue
            if np.abs(coords[j] - coords[i]).max() > r:
                continue
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                beaten = True
                break
        if not beaten:
            keep.add(tuple(int(v) for v in coords[i]))
    return keep


# ------------------------------------------------------------- voxelizer

def brute_voxelize(points, grid):
    """Hash-map binning; returns dict bin -> (mean feature float64, count)."""
    lo = np.asarray(grid.range_min, dtype=np.float64)
    hi = np.asarray(grid.range_max, dtype=np.float64)
    vs = np.asarray(grid.voxel_size, dtype=np.float64)
    extent = np.asarray(grid.extent, dtype=np.int64)
    buckets: dict[tuple, list] = {}
    kept = 0
    for p in np.asarray(points, dtype=np.float64):
        if np.any(p[:3] < lo) or np.any(p[:3] >= hi):
            continue
        kept += 1
        b = np.minimum(np.floor((p[:3] - lo) / vs).astype(np.int64), extent - 1)
        b = np.maximum(b, 0)
        buckets.setdefault(tuple(int(v) for v in b), []).append(p)
    out = {}
    for key, pts in buckets.items():
        center = lo + (np.asarray(key) + 0.5) * vs
        rel = np.asarray([np.float32(p[:3] - center) for p in pts], dtype=np.float64)
        inten = np.asarray([p[3] for p in pts], dtype=np.float64)
        cnt = len(pts)
        feat = np.concatenate([rel.mean(axis=0), [inten.mean(), cnt / (cnt + 1)]])
        out[key] = (feat, cnt)
    return out, kept


# ------------------------------------------------------------------ head

def scalar_focal(pred, target, gamma=2.0, alpha=0.25) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    total = 0.0
    for p, t in zip(pred.ravel(), target.ravel()):
        if t > 0.5:
            total += -alpha * (1 - p) ** gamma * math.log(p)
        else:
            total += -(1 - alpha) * p ** gamma * math.log(1 - p)
    return total / pred.size


def scalar_l1(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    total = 0.0
    for a, b in zip(pred.ravel(), target.ravel()):
        total += abs(a - b)
    return total / pred.size


def brute_nearest_voxel(box_center, coords, grid, stride=8):
    """Index of the active voxel whose center is nearest the projected box
    center; ties resolve to the first (canonical) row."""
    ux = (box_center[0] - grid.range_min[0]) / (grid.voxel_size[0] * stride)
    uy = (box_center[1] - grid.range_min[1]) / (grid.voxel_size[1] * stride)
    best, best_d = None, None
    for i, (ix, iy) in enumerate(coords[:, :2]):
        d = math.hypot(ix + 0.5 - ux, iy + 0.5 - uy)
        if best_d is None or d < best_d:
            best, best_d = i, d
    return best, best_d


# --------------------------------------------------------------- metrics

def shapely_iou(center_a, size_a, yaw_a, center_b, size_b, yaw_b) -> float:
    from shapely.geometry import Polygon

    def poly(center, size, yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        hx, hy = size[0] / 2, size[1] / 2
        pts = [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)]
        return Polygon([(center[0] + c * x - s * y, center[1] + s * x + c * y)
                        for x, y in pts])

    pa, pb = poly(center_a, size_a, yaw_a), poly(center_b, size_b, yaw_b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0
