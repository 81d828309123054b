"""Six-stage sparse CNN backbone.

Stages run at strides {1, 2, 4, 8, 16, 32}. The outputs of the last three
stages are fused onto the stride-8 grid (coordinates of the stride-16/32
stages scaled by 2/4 on every axis, coincident features summed) and the
fused tensor is height-compressed into the 2D map the prediction head
consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse
from .errors import ChannelMismatch, ShapeMismatch
from .sparse import ConvLayer, FlopsReport, SparseTensor

NUM_STAGES = 6
STAGE_STRIDES = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    """Channel plan and pruning layout of the six-stage backbone."""

    channels: tuple[int, ...] = (16, 32, 64, 128, 128, 128)
    blocks_per_stage: int = 2
    prune_ratio: float = 0.5
    prune_stages: frozenset[int] = frozenset((1, 2, 3))
    mode: str = "3d"            # "3d": 3D stages then height compression; "2d": compress first
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "prune_stages", frozenset(int(s) for s in self.prune_stages))
        if len(self.channels) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage channels, got {len(self.channels)}")
        if not self.prune_stages <= set(range(1, NUM_STAGES)):
            raise ValueError(f"prune_stages must be within 1..{NUM_STAGES - 1}")
        if self.mode not in ("3d", "2d"):
            raise ValueError(f"unknown backbone mode {self.mode!r}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError("prune_ratio must be in [0, 1)")

    @property
    def dims(self) -> int:
        return 3 if self.mode == "3d" else 2


@dataclass(frozen=True)
class StageWeights:
    """One stage: optional downsampling conv plus the residual blocks."""

    downsample: ConvLayer | None
    blocks: tuple[tuple[ConvLayer, ConvLayer], ...]


@dataclass(frozen=True)
class BackboneWeights:
    """Stem conv plus the six stage weight groups, channel-chained."""

    stem: ConvLayer
    stages: tuple[StageWeights, ...]

    def __post_init__(self):
        if len(self.stages) != NUM_STAGES:
            raise ShapeMismatch(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        prev = self.stem.out_channels
        for i, stage in enumerate(self.stages):
            if stage.downsample is not None:
                if stage.downsample.in_channels != prev:
                    raise ChannelMismatch(f"stage {i + 1} downsample input width broken")
                prev = stage.downsample.out_channels
            for w1, w2 in stage.blocks:
                if w1.in_channels != prev or w1.out_channels != prev \
                        or w2.in_channels != prev or w2.out_channels != prev:
                    raise ChannelMismatch(f"stage {i + 1} block widths broken")


def residual_block(t: SparseTensor, w1: ConvLayer, w2: ConvLayer,
                   report: FlopsReport | None = None) -> SparseTensor:
    """conv -> ReLU -> conv -> add input -> ReLU; coordinates never change."""
    if w1.out_channels != t.num_channels or w2.out_channels != t.num_channels:
        raise ChannelMismatch("residual block must preserve the channel width")
    y = sparse.submanifold_conv(t, w1)
    if report is not None:
        report.add(sparse.count_flops(t, w1, y))
    y = sparse.relu(y)
    z = sparse.submanifold_conv(y, w2)
    if report is not None:
        report.add(sparse.count_flops(y, w2, z))
    return sparse.with_features(t, np.maximum(z.features + t.features, 0))


def run_stages(t0: SparseTensor, weights: BackboneWeights, cfg: BackboneConfig,
               report: FlopsReport | None = None) -> list[SparseTensor]:
    """Run stem + all six stages, returning the per-stage output tensors."""
    t = sparse.submanifold_conv(t0, weights.stem)
    if report is not None:
        report.add(sparse.count_flops(t0, weights.stem, t))
    t = sparse.relu(t)
    outputs = []
    for stage in weights.stages:
        if stage.downsample is not None:
            tin = t
            t = sparse.strided_conv_downsample(tin, stage.downsample)
            if report is not None:
                report.add(sparse.count_flops(tin, stage.downsample, t))
            t = sparse.relu(t)
        for w1, w2 in stage.blocks:
            t = residual_block(t, w1, w2, report)
        outputs.append(t)
    return outputs


def merge_stride_ladder(f4: SparseTensor, f5: SparseTensor, f6: SparseTensor) -> SparseTensor:
    """Union the last three stages on the stride-8 grid.

    Stride-16 coordinates are scaled by 2 and stride-32 ones by 4 on every
    axis; features at coincident coordinates are summed (the merge is
    parameter-free because all three stages share one channel width).
    """
    if not (f4.num_channels == f5.num_channels == f6.num_channels):
        raise ChannelMismatch("fused stages must share a channel width")
    coords = np.concatenate([f4.coords, f5.coords * 2, f6.coords * 4])
    feats = np.concatenate([f4.features, f5.features, f6.features])
    return sparse.build_sparse_tensor(coords, feats, f4.stride, f4.extent, merge=True)


def _forward(t0, weights, cfg, report):
    if t0.stride != 1:
        raise ShapeMismatch(f"backbone input must be stride 1, got {t0.stride}")
    if cfg.mode == "2d":
        t0 = sparse.height_compress(t0)
    feats = run_stages(t0, weights, cfg, report)
    fc = merge_stride_ladder(feats[3], feats[4], feats[5])
    if cfg.mode == "3d":
        fc = sparse.height_compress(fc)
    return fc


def forward_backbone(t0: SparseTensor, weights: BackboneWeights,
                     cfg: BackboneConfig) -> SparseTensor:
    """Full backbone pass: returns the fused 2D stride-8 feature tensor."""
    return _forward(t0, weights, cfg, None)


def profile_backbone(t0: SparseTensor, weights: BackboneWeights,
                     cfg: BackboneConfig) -> FlopsReport:
    """Run the backbone while accumulating per-layer FLOPs entries."""
    report = FlopsReport()
    _forward(t0, weights, cfg, report)
    return report
