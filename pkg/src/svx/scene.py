"""Synthetic scene generation for desk-scale testing.

Boxes are described parametrically (center, size, yaw, velocity) and points
are sampled from their surfaces — LIDAR returns sit on object surfaces, not
inside them — plus a flat ground plane of background returns. Everything is
driven by one seeded generator, so a scene spec reproduces bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .head import GroundTruthBox
from .voxelize import PointCloud


@dataclass(frozen=True)
class SceneBox:
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    points: int = 300


@dataclass
class SceneSpec:
    boxes: list[SceneBox] = field(default_factory=list)
    seed: int = 0
    frames: int = 1
    dt: float = 0.5
    t0: float = 0.0
    first_frame_id: int = 0
    num_background: int = 2000
    background_xy: tuple[float, float, float, float] = (-50.0, -50.0, 50.0, 50.0)
    background_z: float = -1.5
    background_jitter: float = 0.05


def load_scene_spec(source) -> SceneSpec:
    """Parse a scene spec from a dict or a JSON file path."""
    if isinstance(source, dict):
        doc = source
    else:
        with open(source) as fh:
            doc = json.load(fh)
    boxes = [
        SceneBox(
            class_id=int(b["class"]),
            center=tuple(float(v) for v in b["center"]),
            size=tuple(float(v) for v in b["size"]),
            yaw=float(b.get("yaw", 0.0)),
            velocity=tuple(float(v) for v in b.get("velocity", (0.0, 0.0))),
            points=int(b.get("points", 300)),
        )
        for b in doc.get("boxes", [])
    ]
    spec = SceneSpec(boxes=boxes)
    for key in ("seed", "frames", "dt", "t0", "first_frame_id", "num_background",
                "background_z", "background_jitter"):
        if key in doc:
            setattr(spec, key, type(getattr(spec, key))(doc[key]))
    if "background_xy" in doc:
        spec.background_xy = tuple(float(v) for v in doc["background_xy"])
    return spec


def _box_at_frame(box: SceneBox, frame: int, dt: float) -> SceneBox:
    t = frame * dt
    cx, cy, cz = box.center
    return SceneBox(box.class_id,
                    (cx + box.velocity[0] * t, cy + box.velocity[1] * t, cz),
                    box.size, box.yaw, box.velocity, box.points)


def sample_box_surface(rng: np.random.Generator, box: SceneBox, n: int) -> np.ndarray:
    """Uniform samples over the four side faces and the top face."""
    l, w, h = box.size
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for face, cnt in enumerate(counts):
        if cnt == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=cnt)
        v = rng.uniform(-0.5, 0.5, size=cnt)
        if face == 0:    # +y side
            local = np.stack([u * l, np.full(cnt, w / 2), v * h], axis=1)
        elif face == 1:  # -y side
            local = np.stack([u * l, np.full(cnt, -w / 2), v * h], axis=1)
        elif face == 2:  # +x side
            local = np.stack([np.full(cnt, l / 2), u * w, v * h], axis=1)
        elif face == 3:  # -x side
            local = np.stack([np.full(cnt, -l / 2), u * w, v * h], axis=1)
        else:            # top
            local = np.stack([u * l, v * w, np.full(cnt, h / 2)], axis=1)
        pts.append(local)
    local = np.concatenate(pts) if pts else np.zeros((0, 3))
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.center[0] + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = box.center[1] + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = box.center[2] + local[:, 2]
    return world


def sample_frame(spec: SceneSpec, frame: int,
                 rng: np.random.Generator) -> tuple[PointCloud, list[GroundTruthBox]]:
    """Points and ground truth for one frame of the moving scene."""
    clouds = []
    gts = []
    for box in spec.boxes:
        moved = _box_at_frame(box, frame, spec.dt)
        xyz = sample_box_surface(rng, moved, box.points)
        intensity = rng.uniform(0.2, 1.0, size=(xyz.shape[0], 1))
        clouds.append(np.concatenate([xyz, intensity], axis=1))
        gts.append(GroundTruthBox(moved.class_id, moved.center, moved.size,
                                  moved.yaw, moved.velocity))
    if spec.num_background:
        x0, y0, x1, y1 = spec.background_xy
        n = spec.num_background
        xyz = np.stack([
            rng.uniform(x0, x1, size=n),
            rng.uniform(y0, y1, size=n),
            spec.background_z + rng.normal(0, spec.background_jitter, size=n),
        ], axis=1)
        intensity = rng.uniform(0.05, 0.4, size=(n, 1))
        clouds.append(np.concatenate([xyz, intensity], axis=1))
    points = np.concatenate(clouds).astype(np.float32) if clouds else np.zeros((0, 4), np.float32)
    pc = PointCloud(points, timestamp=spec.t0 + frame * spec.dt,
                    frame_id=spec.first_frame_id + frame)
    return pc, gts


def generate_scene(spec: SceneSpec) -> list[tuple[PointCloud, list[GroundTruthBox]]]:
    """All frames of the scene, one seeded generator across frames."""
    rng = np.random.default_rng(spec.seed)
    return [sample_frame(spec, f, rng) for f in range(spec.frames)]


def gt_record(box: GroundTruthBox) -> dict:
    return {
        "class": box.class_id,
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "velocity": list(box.velocity),
    }


def gt_from_record(rec: dict) -> GroundTruthBox:
    return GroundTruthBox(
        class_id=int(rec["class"]),
        center=tuple(float(v) for v in rec["center"]),
        size=tuple(float(v) for v in rec["size"]),
        yaw=float(rec["yaw"]),
        velocity=tuple(float(v) for v in rec.get("velocity", (0.0, 0.0))),
    )
