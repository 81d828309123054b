"""Flat key-value configuration with [grid], [backbone], [head], [tracker]
sections. Missing keys fall back to the built-in driving-scene defaults."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .head import HeadConfig
from .tracker import AssociationConfig
from .voxelize import GridConfig


@dataclass
class PipelineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=lambda: HeadConfig(num_classes=3))
    tracker: AssociationConfig = field(default_factory=AssociationConfig)


def default_config() -> PipelineConfig:
    return PipelineConfig()


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _groups(raw: str) -> tuple[tuple[int, ...], ...]:
    # e.g. "0 | 1, 2" -> ((0,), (1, 2))
    return tuple(_ints(part) for part in raw.split("|") if part.strip())


def load_config(path) -> PipelineConfig:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)

    base = default_config()
    grid = base.grid
    if cp.has_section("grid"):
        g = cp["grid"]
        grid = GridConfig(
            range_min=_floats(g.get("range_min", "-54, -54, -5")),
            range_max=_floats(g.get("range_max", "54, 54, 3")),
            voxel_size=_floats(g.get("voxel_size", "0.075, 0.075, 0.2")),
        )

    backbone = base.backbone
    if cp.has_section("backbone"):
        b = cp["backbone"]
        backbone = BackboneConfig(
            channels=_ints(b.get("channels", "16, 32, 64, 128, 128, 128")),
            blocks_per_stage=b.getint("blocks_per_stage", 2),
            prune_ratio=b.getfloat("prune_ratio", 0.5),
            prune_stages=frozenset(_ints(b.get("prune_stages", "1, 2, 3"))),
            mode=b.get("mode", "3d").strip().lower(),
            kernel_size=b.getint("kernel_size", 3),
        )

    head = base.head
    if cp.has_section("head"):
        h = cp["head"]
        num_classes = h.getint("num_classes", 3)
        head = HeadConfig(
            num_classes=num_classes,
            class_groups=_groups(h.get("class_groups", "")),
            head_kernel=h.getint("head_kernel", 3),
            maxpool_kernel=_ints(h.get("maxpool_kernel", "")) if h.get("maxpool_kernel", "") else (),
            score_threshold=h.getfloat("score_threshold", 0.1),
            max_detections=h.getint("max_detections", 500),
            regress_velocity=h.getboolean("regress_velocity", True),
        )

    tracker = base.tracker
    if cp.has_section("tracker"):
        t = cp["tracker"]
        gates = {}
        raw_gates = t.get("class_center_gates", "")
        if raw_gates.strip():
            # e.g. "0:4.0, 1:1.0"
            for part in raw_gates.split(","):
                cid, gate = part.split(":")
                gates[int(cid)] = float(gate)
        tracker = AssociationConfig(
            center_gate=t.getfloat("center_gate", 2.0),
            class_center_gates=gates,
            voxel_gate=t.getfloat("voxel_gate", 2.0),
            max_age=t.getint("max_age", 3),
            min_hits=t.getint("min_hits", 1),
            use_voxel_association=t.getboolean("use_voxel_association", True),
        )

    return PipelineConfig(grid=grid, backbone=backbone, head=head, tracker=tracker)
