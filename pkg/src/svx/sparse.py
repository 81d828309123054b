"""Sparse voxel tensors and the kernel primitives operating on them.

Everything in this module is a pure function over immutable data, and every
operation is bit-deterministic: coordinates are kept in canonical order and
features are accumulated kernel-offset major, canonical coordinate order
within each offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChannelMismatch,
    DuplicateCoordinates,
    OutOfExtent,
    ShapeMismatch,
)

SUBMANIFOLD = "submanifold"
STRIDED = "strided"

_EMPTY_ROWS = np.zeros(0, dtype=np.int64)


def linear_keys(coords: np.ndarray, extent) -> np.ndarray:
    """Row-wise linear grid index; ascending key order is canonical order.

    Canonical order is lexicographic by (z, y, x) for 3D coordinates and by
    (y, x) for 2D ones, with coordinate columns stored as (x, y[, z]).
    """
    keys = coords[:, -1].astype(np.int64)
    for axis in range(len(extent) - 2, -1, -1):
        keys = keys * int(extent[axis]) + coords[:, axis]
    return keys


def _keys_to_coords(keys: np.ndarray, extent) -> np.ndarray:
    dims = len(extent)
    out = np.empty((keys.shape[0], dims), dtype=np.int64)
    rem = keys
    for axis in range(dims - 1):
        out[:, axis] = rem % int(extent[axis])
        rem = rem // int(extent[axis])
    out[:, dims - 1] = rem
    return out


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Active integer coordinates plus one feature row per coordinate.

    ``coords`` holds (x, y, z) rows ((x, y) for 2D tensors) in voxel units at
    ``stride``. Rows are unique, lie inside ``extent`` on every axis, and are
    stored canonically ordered, so identical inputs give bit-identical
    outputs everywhere downstream. Instances are immutable; share freely
    across threads.
    """

    coords: np.ndarray          # (N, dims) int64
    features: np.ndarray        # (N, C) float32
    stride: int
    extent: tuple[int, ...]

    @property
    def dims(self) -> int:
        return self.coords.shape[1]

    @property
    def num_sites(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.extent)

    def coord_set(self) -> set[tuple[int, ...]]:
        return {tuple(int(v) for v in row) for row in self.coords}


def _tensor(coords, features, stride, extent) -> SparseTensor:
    coords = np.ascontiguousarray(coords, dtype=np.int64)
    features = np.ascontiguousarray(features, dtype=np.float32)
    coords.setflags(write=False)
    features.setflags(write=False)
    return SparseTensor(coords, features, int(stride), tuple(int(e) for e in extent))


def empty_tensor(num_channels: int, stride: int, extent) -> SparseTensor:
    dims = len(extent)
    return _tensor(np.zeros((0, dims)), np.zeros((0, num_channels)), stride, extent)


def with_features(t: SparseTensor, features: np.ndarray) -> SparseTensor:
    """Same coordinate pattern, new feature rows."""
    features = np.asarray(features, dtype=np.float32)
    if features.shape[0] != t.num_sites:
        raise ShapeMismatch(
            f"{features.shape[0]} feature rows for {t.num_sites} sites"
        )
    return _tensor(t.coords, features, t.stride, t.extent)


def relu(t: SparseTensor) -> SparseTensor:
    return with_features(t, np.maximum(t.features, np.float32(0.0)))


def build_sparse_tensor(coords, features, stride, extent, merge=False) -> SparseTensor:
    """Validate, canonically sort, and (with ``merge``) sum duplicate sites.

    Raises OutOfExtent for coordinates outside [0, extent) and ShapeMismatch
    when coordinate and feature row counts disagree. Without ``merge``,
    duplicate coordinates raise; with it their feature rows are summed in
    input order.
    """
    extent = tuple(int(e) for e in extent)
    dims = len(extent)
    carr = np.asarray(coords, dtype=np.int64)
    if carr.size == 0:
        carr = np.zeros((0, dims), dtype=np.int64)
    if carr.ndim != 2 or carr.shape[1] != dims:
        raise ShapeMismatch(f"expected (N, {dims}) coordinates, got shape {carr.shape}")
    farr = np.asarray(features, dtype=np.float32)
    if farr.size == 0 and farr.ndim != 2:
        farr = farr.reshape(0, 0)
    if farr.ndim != 2:
        raise ShapeMismatch(f"expected (N, C) features, got shape {farr.shape}")
    if farr.shape[0] != carr.shape[0]:
        raise ShapeMismatch(
            f"{carr.shape[0]} coordinates but {farr.shape[0]} feature rows"
        )
    if carr.shape[0]:
        bad = (carr < 0) | (carr >= np.asarray(extent, dtype=np.int64))
        if bad.any():
            row = int(np.flatnonzero(bad.any(axis=1))[0])
            raise OutOfExtent(
                f"coordinate {tuple(carr[row])} outside extent {extent}"
            )

    keys = linear_keys(carr, extent)
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    scoords = carr[order]
    sfeats = farr[order]
    if skeys.size:
        dup = skeys[1:] == skeys[:-1]
        if dup.any():
            if not merge:
                raise DuplicateCoordinates(
                    f"{int(dup.sum())} duplicated coordinates (merge not requested)"
                )
            starts = np.flatnonzero(np.concatenate(([True], ~dup)))
            sfeats = np.add.reduceat(sfeats, starts, axis=0)
            scoords = scoords[starts]
    return _tensor(scoords, sfeats, stride, extent)


@dataclass(frozen=True, eq=False)
class ConvLayer:
    """Weights and pruning config of one sparse convolution.

    ``weights`` has shape (K,)*dims + (C_in, C_out); the kernel offset
    o = (ox, oy[, oz]) indexes ``weights[o + K//2]`` componentwise.
    ``prune_ratio`` only applies to strided layers: the lowest-magnitude
    fraction of input voxels has its dilation suppressed. By default those
    voxels still contribute through the center offset; ``prune_drop`` removes
    them outright instead (comparison mode).
    """

    weights: np.ndarray
    bias: np.ndarray
    mode: str = SUBMANIFOLD
    prune_ratio: float = 0.0
    prune_drop: bool = False
    name: str = ""

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        if w.ndim not in (4, 5):
            raise ShapeMismatch(f"kernel must be (K,)*dims + (C_in, C_out), got {w.shape}")
        dims = w.ndim - 2
        k = w.shape[0]
        if w.shape[:dims] != (k,) * dims:
            raise ShapeMismatch(f"kernel must be cubic, got {w.shape[:dims]}")
        if k % 2 == 0:
            raise ShapeMismatch(f"kernel size must be odd, got {k}")
        if b.shape != (w.shape[-1],):
            raise ShapeMismatch(f"bias shape {b.shape} does not match C_out {w.shape[-1]}")
        if self.mode not in (SUBMANIFOLD, STRIDED):
            raise ValueError(f"unknown conv mode {self.mode!r}")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError(f"prune_ratio must be in [0, 1), got {self.prune_ratio}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def dims(self) -> int:
        return self.weights.ndim - 2

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[-2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[-1]


def _kernel_offsets(kernel_size: int, dims: int) -> np.ndarray:
    """All kernel offsets, ordered lexicographically by (ox, oy[, oz]).

    This ordering is the fixed offset-major accumulation order.
    """
    r = kernel_size // 2
    axes = [np.arange(-r, r + 1)] * dims
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def _check_layer(t: SparseTensor, layer: ConvLayer):
    if layer.dims != t.dims:
        raise ShapeMismatch(f"{layer.dims}D kernel applied to {t.dims}D tensor")
    if layer.in_channels != t.num_channels:
        raise ChannelMismatch(
            f"layer expects {layer.in_channels} input channels, tensor has {t.num_channels}"
        )


def _offset_pairs(coords, keys, extent, query_coords, query_rows, offset):
    """Match ``query_coords + offset`` against the canonical key table.

    Returns (base_rows, query_rows) restricted to queries whose shifted
    coordinate is active. ``keys`` must be the ascending keys of ``coords``.
    """
    n = keys.shape[0]
    if n == 0 or query_rows.shape[0] == 0:
        return _EMPTY_ROWS, _EMPTY_ROWS
    q = query_coords + offset
    ext = np.asarray(extent, dtype=np.int64)
    valid = np.all((q >= 0) & (q < ext), axis=1)
    if not valid.any():
        return _EMPTY_ROWS, _EMPTY_ROWS
    qrows = query_rows[valid]
    qkeys = linear_keys(q[valid], extent)
    pos = np.searchsorted(keys, qkeys)
    pos = np.minimum(pos, n - 1)
    found = keys[pos] == qkeys
    return pos[found], qrows[found]


def submanifold_conv(t: SparseTensor, layer: ConvLayer) -> SparseTensor:
    """Convolution that only writes at active sites: the output coordinate
    set equals the input coordinate set exactly, and stride is unchanged."""
    if layer.mode != SUBMANIFOLD:
        raise ValueError(f"submanifold_conv given a {layer.mode!r} layer")
    _check_layer(t, layer)
    feats, _ = _subm_features(t, layer, np.arange(t.num_sites))
    return _tensor(t.coords, feats, t.stride, t.extent)


def submanifold_conv_at(t: SparseTensor, layer: ConvLayer, rows) -> tuple[np.ndarray, int]:
    """Evaluate a submanifold convolution only at the given tensor rows.

    Returns the (len(rows), C_out) features and the number of realized
    rulebook pairs. Duplicate rows are evaluated once and broadcast back.
    """
    if layer.mode != SUBMANIFOLD:
        raise ValueError(f"submanifold_conv_at given a {layer.mode!r} layer")
    _check_layer(t, layer)
    rows = np.asarray(rows, dtype=np.int64)
    uniq, inverse = np.unique(rows, return_inverse=True)
    feats, pairs = _subm_features(t, layer, uniq)
    return feats[inverse], pairs


def _subm_features(t, layer, out_rows):
    # accumulate in float64, round once at the end: keeps results within the
    # dense-oracle tolerance while tensors stay float32
    m = out_rows.shape[0]
    out = np.repeat(layer.bias[None, :].astype(np.float64), m, axis=0)
    if m == 0:
        return out.astype(np.float32), 0
    keys = t.keys()
    feats = t.features.astype(np.float64)
    weights = layer.weights.astype(np.float64)
    qcoords = t.coords[out_rows]
    qidx = np.arange(m, dtype=np.int64)
    pairs = 0
    r = layer.kernel_size // 2
    for off in _kernel_offsets(layer.kernel_size, t.dims):
        in_rows, hit = _offset_pairs(t.coords, keys, t.extent, qcoords, qidx, off)
        if in_rows.size == 0:
            continue
        pairs += int(in_rows.size)
        out[hit] += feats[in_rows] @ weights[tuple(off + r)]
    return out.astype(np.float32), pairs


def dilation_row_mask(t: SparseTensor, prune_ratio: float) -> np.ndarray:
    """Rows whose channel-averaged |feature| ranks in the kept top fraction.

    Exactly ceil((1 - prune_ratio) * N) rows are kept; magnitude ties go to
    the canonically earlier coordinate.
    """
    n = t.num_sites
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask
    # -1e-9 guards binary-float ratios (e.g. 0.1) whose product with N can
    # round just above the mathematically exact integer.
    keep = math.ceil((1.0 - prune_ratio) * n - 1e-9)
    mag = np.abs(t.features).mean(axis=1)
    order = np.argsort(-mag, kind="stable")
    mask[order[:keep]] = True
    return mask


def select_dilation_set(t: SparseTensor, prune_ratio: float) -> set[tuple[int, ...]]:
    """Coordinates allowed to dilate in a pruned strided convolution."""
    if not 0.0 <= prune_ratio < 1.0:
        raise ValueError(f"prune_ratio must be in [0, 1), got {prune_ratio}")
    mask = dilation_row_mask(t, prune_ratio)
    return {tuple(int(v) for v in row) for row in t.coords[mask]}


def strided_conv_downsample(t: SparseTensor, layer: ConvLayer) -> SparseTensor:
    """Stride-2 downsampling convolution with optional dilation pruning.

    Each input voxel q scatters W[o]·f_q to the output site floor((q+o)/2);
    voxels outside the dilation selection only contribute through the center
    offset (or not at all under ``prune_drop``). Offsets landing outside the
    input extent are dropped (zero padding). Stride doubles, extent halves
    with ceiling.
    """
    if layer.mode != STRIDED:
        raise ValueError(f"strided_conv_downsample given a {layer.mode!r} layer")
    _check_layer(t, layer)
    out_extent = tuple((e + 1) // 2 for e in t.extent)
    out_stride = t.stride * 2
    n = t.num_sites
    if n == 0:
        return empty_tensor(layer.out_channels, out_stride, out_extent)

    sel_rows = np.flatnonzero(dilation_row_mask(t, layer.prune_ratio))
    all_rows = np.arange(n, dtype=np.int64)
    ext = np.asarray(t.extent, dtype=np.int64)
    r = layer.kernel_size // 2

    contribs = []
    for off in _kernel_offsets(layer.kernel_size, t.dims):
        center = not off.any()
        if center:
            rows = sel_rows if layer.prune_drop else all_rows
        else:
            rows = sel_rows
        if rows.size == 0:
            continue
        q = t.coords[rows] + off
        valid = np.all((q >= 0) & (q < ext), axis=1)
        if not valid.any():
            continue
        rows = rows[valid]
        okeys = linear_keys(q[valid] // 2, out_extent)
        contribs.append((tuple(off + r), rows, okeys))

    if not contribs:
        return empty_tensor(layer.out_channels, out_stride, out_extent)
    out_keys = np.unique(np.concatenate([c[2] for c in contribs]))
    # float64 accumulation, rounded to float32 once at the end
    out = np.repeat(layer.bias[None, :].astype(np.float64), out_keys.shape[0], axis=0)
    feats = t.features.astype(np.float64)
    weights = layer.weights.astype(np.float64)
    for widx, rows, okeys in contribs:
        orows = np.searchsorted(out_keys, okeys)
        np.add.at(out, orows, feats[rows] @ weights[widx])
    return _tensor(_keys_to_coords(out_keys, out_extent), out, out_stride, out_extent)


def max_pool_rows(scores: SparseTensor, kernel_size: int) -> np.ndarray:
    """Row indices of the kernel-window local maxima, ascending.

    A site is removed when an active neighbour in its window scores strictly
    higher, or scores equal and precedes it canonically — exact ties keep
    only the canonically first site.
    """
    if scores.num_channels != 1:
        raise ShapeMismatch(
            f"max pooling expects a single channel, got {scores.num_channels}"
        )
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    n = scores.num_sites
    if n == 0:
        return _EMPTY_ROWS
    s = scores.features[:, 0]
    keys = scores.keys()
    rows = np.arange(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for off in _kernel_offsets(kernel_size, scores.dims):
        if not off.any():
            continue
        nb, here = _offset_pairs(scores.coords, keys, scores.extent, scores.coords, rows, off)
        if nb.size == 0:
            continue
        beaten = (s[nb] > s[here]) | ((s[nb] == s[here]) & (nb < here))
        alive[here[beaten]] = False
    return np.flatnonzero(alive)


def sparse_max_pool(scores: SparseTensor, kernel_size: int) -> set[tuple[int, ...]]:
    """Coordinates surviving local-maximum selection (see max_pool_rows)."""
    rows = max_pool_rows(scores, kernel_size)
    return {tuple(int(v) for v in row) for row in scores.coords[rows]}


def height_compress(t: SparseTensor) -> SparseTensor:
    """Project a 3D tensor to 2D: drop z and sum features sharing (x, y).

    Summation runs in ascending z per column, so the per-channel mass over
    all sites is preserved and the result is deterministic.
    """
    if t.dims != 3:
        raise ShapeMismatch(f"height compression needs a 3D tensor, got {t.dims}D")
    out_extent = (t.extent[0], t.extent[1])
    if t.num_sites == 0:
        return empty_tensor(t.num_channels, t.stride, out_extent)
    keys2 = t.coords[:, 1] * out_extent[0] + t.coords[:, 0]
    order = np.argsort(keys2, kind="stable")
    skeys = keys2[order]
    starts = np.flatnonzero(np.concatenate(([True], skeys[1:] != skeys[:-1])))
    feats = np.add.reduceat(t.features[order], starts, axis=0)
    heads = skeys[starts]
    coords2 = np.stack([heads % out_extent[0], heads // out_extent[0]], axis=1)
    return _tensor(coords2, feats, t.stride, out_extent)


@dataclass(frozen=True)
class FlopsEntry:
    """Per-layer accounting; realized rulebook pairs drive the MAC count."""

    name: str
    group: str                  # "backbone" | "head"
    input_sites: int
    output_sites: int
    pairs: int                  # realized (input site, offset, output site) triples
    macs: int
    flops: int


@dataclass
class FlopsReport:
    """Accumulated per-layer FLOPs, split into backbone and head totals."""

    entries: list[FlopsEntry] = field(default_factory=list)

    def add(self, entry: FlopsEntry):
        self.entries.append(entry)

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def group_flops(self, group: str) -> int:
        return sum(e.flops for e in self.entries if e.group == group)


def count_rulebook_pairs(t: SparseTensor, layer: ConvLayer) -> int:
    """Number of realized (input site, kernel offset, output site) triples."""
    n = t.num_sites
    if n == 0:
        return 0
    keys = t.keys()
    rows = np.arange(n, dtype=np.int64)
    ext = np.asarray(t.extent, dtype=np.int64)
    total = 0
    if layer.mode == SUBMANIFOLD:
        for off in _kernel_offsets(layer.kernel_size, t.dims):
            in_rows, _ = _offset_pairs(t.coords, keys, t.extent, t.coords, rows, off)
            total += int(in_rows.size)
        return total
    sel_rows = np.flatnonzero(dilation_row_mask(t, layer.prune_ratio))
    for off in _kernel_offsets(layer.kernel_size, t.dims):
        if not off.any():
            use = sel_rows if layer.prune_drop else rows
        else:
            use = sel_rows
        if use.size == 0:
            continue
        q = t.coords[use] + off
        total += int(np.all((q >= 0) & (q < ext), axis=1).sum())
    return total


def count_flops(t_in: SparseTensor, layer: ConvLayer, t_out: SparseTensor,
                group: str = "backbone", name: str | None = None) -> FlopsEntry:
    """FLOPs of one layer: 2 per multiply-add, plus one add per output
    channel per output site for the bias."""
    pairs = count_rulebook_pairs(t_in, layer)
    macs = pairs * layer.in_channels * layer.out_channels
    flops = 2 * macs + layer.out_channels * t_out.num_sites
    return FlopsEntry(
        name=name if name is not None else (layer.name or layer.mode),
        group=group,
        input_sites=t_in.num_sites,
        output_sites=t_out.num_sites,
        pairs=pairs,
        macs=macs,
        flops=flops,
    )
