"""Fully sparse prediction head.

Per-voxel class scores come from a 1x1 or 3x3 submanifold convolution over
the 2D stride-8 feature map; query voxels are picked per class by sparse max
pooling (no NMS anywhere), and boxes are regressed only at the selected
voxels. Target assignment and the two loss functions are provided for
verification; there is no optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import sparse
from .errors import InactiveQuery, NoActiveVoxels, ShapeMismatch
from .sparse import ConvLayer, FlopsReport, SparseTensor
from .voxelize import GridConfig

HEAD_STRIDE = 8
_LOSS_EPS = 1e-12


@dataclass(frozen=True)
class HeadConfig:
    """Class layout and selection parameters of the sparse head.

    ``class_groups`` partitions class ids into groups sharing prediction
    layers; empty means one group per class. ``maxpool_kernel`` is the
    per-group local-maximum window (empty: 3 everywhere; use larger windows
    for large-object groups).
    """

    num_classes: int = 1
    class_groups: tuple[tuple[int, ...], ...] = ()
    head_kernel: int = 3            # 1 (fully connected) | 3 (submanifold conv)
    maxpool_kernel: tuple[int, ...] = ()
    score_threshold: float = 0.1
    max_detections: int = 500
    regress_velocity: bool = True

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        groups = tuple(tuple(int(c) for c in g) for g in self.class_groups)
        if not groups:
            groups = tuple((k,) for k in range(self.num_classes))
        seen = [c for g in groups for c in g]
        if sorted(seen) != list(range(self.num_classes)):
            raise ValueError("class_groups must partition 0..num_classes-1")
        kernels = tuple(int(k) for k in self.maxpool_kernel)
        if not kernels:
            kernels = (3,) * len(groups)
        if len(kernels) == 1 and len(groups) > 1:
            kernels = kernels * len(groups)
        if len(kernels) != len(groups):
            raise ValueError("need one maxpool kernel per class group")
        for k in (self.head_kernel, *kernels):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if self.head_kernel not in (1, 3):
            raise ValueError("head_kernel must be 1 or 3")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must be in (0, 1)")
        if self.max_detections < 1:
            raise ValueError("max_detections must be positive")
        object.__setattr__(self, "class_groups", groups)
        object.__setattr__(self, "maxpool_kernel", kernels)

    @property
    def num_groups(self) -> int:
        return len(self.class_groups)

    @property
    def group_of_class(self) -> tuple[int, ...]:
        out = [0] * self.num_classes
        for g, classes in enumerate(self.class_groups):
            for c in classes:
                out[c] = g
        return tuple(out)

    @property
    def num_reg_channels(self) -> int:
        # dx, dy, z, log l, log w, log h, sin, cos [, vx, vy]
        return 10 if self.regress_velocity else 8


@dataclass(frozen=True)
class GroupWeights:
    """Prediction layers shared by one class group."""

    cls: ConvLayer
    reg: ConvLayer


@dataclass(frozen=True)
class HeadWeights:
    groups: tuple[GroupWeights, ...]


@dataclass(frozen=True)
class QueryVoxel:
    """One selected voxel: where a box will be predicted from."""

    coord: tuple[int, int]
    class_id: int
    score: float
    row: int                    # row index in the stride-8 feature tensor


@dataclass(frozen=True)
class RegressionOutput:
    """Raw regression channels for one selected voxel.

    Offsets are voxel fractions at the head stride, z and sizes are metric
    (sizes in log space), the angle is a raw (sin, cos) pair.
    """

    dx: float
    dy: float
    z: float
    log_l: float
    log_w: float
    log_h: float
    sin_yaw: float
    cos_yaw: float
    vx: float | None = None
    vy: float | None = None

    def vector(self) -> np.ndarray:
        vals = [self.dx, self.dy, self.z, self.log_l, self.log_w, self.log_h,
                self.sin_yaw, self.cos_yaw]
        if self.vx is not None:
            vals += [self.vx, self.vy]
        return np.asarray(vals, dtype=np.float64)

    @staticmethod
    def from_vector(vec) -> "RegressionOutput":
        vec = [float(v) for v in vec]
        if len(vec) not in (8, 10):
            raise ShapeMismatch(f"regression vector must have 8 or 10 entries, got {len(vec)}")
        vel = vec[8:] if len(vec) == 10 else (None, None)
        return RegressionOutput(*vec[:8], vx=vel[0], vy=vel[1])


@dataclass(frozen=True)
class Detection:
    """One decoded box, carrying its query-voxel provenance for tracking."""

    class_id: int
    score: float
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] | None
    query_voxel: tuple[int, int]
    query_pos: tuple[float, float]
    frame_id: int = 0


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class PositiveSample:
    """Positive voxel for one ground-truth box."""

    gt_index: int
    class_id: int
    voxel: tuple[int, int]
    row: int
    target: np.ndarray          # regression target vector
    distance: float             # in stride-8 voxel units
    owns_voxel: bool            # False if a nearer same-class box claimed the voxel


@dataclass(frozen=True)
class TargetAssignment:
    positives: tuple[PositiveSample, ...]
    cls_target: np.ndarray      # (N, K) one-hot at positive (voxel, class) cells


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def classify_voxels(fc: SparseTensor, weights: HeadWeights, cfg: HeadConfig,
                    report: FlopsReport | None = None) -> SparseTensor:
    """Sigmoid class scores at every active voxel; coordinates unchanged."""
    raw = np.zeros((fc.num_sites, cfg.num_classes), dtype=np.float32)
    for g, classes in enumerate(cfg.class_groups):
        layer = weights.groups[g].cls
        out = sparse.submanifold_conv(fc, layer)
        if report is not None:
            report.add(sparse.count_flops(fc, layer, out, group="head"))
        raw[:, list(classes)] = out.features
    return sparse.with_features(fc, _sigmoid(raw))


def select_query_voxels(scores: SparseTensor, cfg: HeadConfig) -> list[QueryVoxel]:
    """Per-class local maxima above the score threshold, best first.

    Voxels removed by the pooling are excluded from box prediction entirely.
    Sorted by descending score (ties: class id, then canonical position) and
    truncated to max_detections.
    """
    if scores.num_channels != cfg.num_classes:
        raise ShapeMismatch(
            f"score tensor has {scores.num_channels} channels for {cfg.num_classes} classes"
        )
    group_of = cfg.group_of_class
    picked = []
    for k in range(cfg.num_classes):
        kernel = cfg.maxpool_kernel[group_of[k]]
        chan = sparse.with_features(scores, scores.features[:, k:k + 1])
        rows = sparse.max_pool_rows(chan, kernel)
        svals = scores.features[rows, k]
        rows = rows[svals >= cfg.score_threshold]
        for r in rows:
            coord = (int(scores.coords[r, 0]), int(scores.coords[r, 1]))
            picked.append(QueryVoxel(coord, k, float(scores.features[r, k]), int(r)))
    picked.sort(key=lambda q: (-q.score, q.class_id, q.row))
    return picked[: cfg.max_detections]


def regress_boxes(fc: SparseTensor, selected: list[QueryVoxel], weights: HeadWeights,
                  cfg: HeadConfig, report: FlopsReport | None = None) -> list[RegressionOutput]:
    """Apply the regression layer only at the selected voxels."""
    key_to_row = {tuple(int(v) for v in c): i for i, c in enumerate(fc.coords)}
    rows = []
    for q in selected:
        row = key_to_row.get(q.coord)
        if row is None:
            raise InactiveQuery(f"query voxel {q.coord} is not active")
        rows.append(row)

    out = [None] * len(selected)
    for g in range(cfg.num_groups):
        idx = [i for i, q in enumerate(selected) if cfg.group_of_class[q.class_id] == g]
        if not idx:
            continue
        layer = weights.groups[g].reg
        feats, pairs = sparse.submanifold_conv_at(fc, layer, [rows[i] for i in idx])
        if report is not None:
            macs = pairs * layer.in_channels * layer.out_channels
            report.add(sparse.FlopsEntry(
                name=layer.name or f"head.group{g}.reg",
                group="head",
                input_sites=fc.num_sites,
                output_sites=len(set(rows[i] for i in idx)),
                pairs=pairs,
                macs=macs,
                flops=2 * macs + layer.out_channels * len(set(rows[i] for i in idx)),
            ))
        for j, i in enumerate(idx):
            out[i] = RegressionOutput.from_vector(feats[j])
    return out


def _project_center(box: GroundTruthBox, grid: GridConfig, stride: int) -> tuple[float, float]:
    ux = (box.center[0] - grid.range_min[0]) / (grid.voxel_size[0] * stride)
    uy = (box.center[1] - grid.range_min[1]) / (grid.voxel_size[1] * stride)
    return ux, uy


def encode_box(box: GroundTruthBox, voxel: tuple[int, int], grid: GridConfig,
               cfg: HeadConfig, stride: int = HEAD_STRIDE) -> np.ndarray:
    """Regression target for a box anchored at the given stride-8 voxel."""
    ux, uy = _project_center(box, grid, stride)
    vals = [
        ux - (voxel[0] + 0.5),
        uy - (voxel[1] + 0.5),
        box.center[2],
        math.log(box.size[0]),
        math.log(box.size[1]),
        math.log(box.size[2]),
        math.sin(box.yaw),
        math.cos(box.yaw),
    ]
    if cfg.regress_velocity:
        vals += [box.velocity[0], box.velocity[1]]
    return np.asarray(vals, dtype=np.float64)


def assign_targets(gt_boxes: list[GroundTruthBox], fc: SparseTensor, grid: GridConfig,
                   cfg: HeadConfig, stride: int = HEAD_STRIDE) -> TargetAssignment:
    """Make the active voxel nearest to each box center its positive sample.

    Distances are Euclidean in stride-8 voxel units between the projected
    box center and voxel centers; ties go to the canonically first voxel.
    When two same-class boxes pick the same voxel the nearer one owns its
    regression target (tie: lower gt index).
    """
    if fc.num_sites == 0:
        raise NoActiveVoxels("cannot assign targets on a frame with no active voxels")
    voxel_centers = fc.coords[:, :2].astype(np.float64) + 0.5
    positives = []
    for gi, box in enumerate(gt_boxes):
        ux, uy = _project_center(box, grid, stride)
        d = np.hypot(voxel_centers[:, 0] - ux, voxel_centers[:, 1] - uy)
        row = int(np.argmin(d))
        voxel = (int(fc.coords[row, 0]), int(fc.coords[row, 1]))
        positives.append(PositiveSample(
            gt_index=gi,
            class_id=box.class_id,
            voxel=voxel,
            row=row,
            target=encode_box(box, voxel, grid, cfg, stride),
            distance=float(d[row]),
            owns_voxel=True,
        ))

    owner: dict[tuple[int, int], int] = {}
    for p in sorted(positives, key=lambda p: (p.distance, p.gt_index)):
        owner.setdefault((p.row, p.class_id), p.gt_index)
    positives = [
        p if owner[(p.row, p.class_id)] == p.gt_index
        else PositiveSample(p.gt_index, p.class_id, p.voxel, p.row, p.target,
                            p.distance, owns_voxel=False)
        for p in positives
    ]

    cls_target = np.zeros((fc.num_sites, cfg.num_classes), dtype=np.float32)
    for p in positives:
        cls_target[p.row, p.class_id] = 1.0
    return TargetAssignment(tuple(positives), cls_target)


def focal_loss(pred_scores, targets, gamma: float = 2.0, alpha: float = 0.25) -> float:
    """Mean focal term over every site x class cell.

    Per cell with score p and one-hot target t:
        t == 1:  -alpha       * (1 - p)**gamma * log(p)
        t == 0:  -(1 - alpha) * p**gamma       * log(1 - p)
    """
    p = np.asarray(pred_scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"scores {p.shape} vs targets {t.shape}")
    if p.size == 0:
        return 0.0
    p = np.clip(p, _LOSS_EPS, 1.0 - _LOSS_EPS)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log1p(-p)
    return float(np.where(t > 0.5, pos, neg).mean())


def focal_loss_logit_grad(logits, targets, gamma: float = 2.0,
                          alpha: float = 0.25) -> np.ndarray:
    """Analytic gradient of focal_loss(sigmoid(logits), targets) w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeMismatch(f"logits {z.shape} vs targets {t.shape}")
    p = np.clip(_sigmoid(z), _LOSS_EPS, 1.0 - _LOSS_EPS)
    gpos = alpha * gamma * p * (1.0 - p) ** gamma * np.log(p) \
        - alpha * (1.0 - p) ** (gamma + 1.0)
    gneg = -(1.0 - alpha) * gamma * p ** gamma * (1.0 - p) * np.log1p(-p) \
        + (1.0 - alpha) * p ** (gamma + 1.0)
    return np.where(t > 0.5, gpos, gneg) / z.size


def regression_matrix(regs) -> np.ndarray:
    """Stack RegressionOutput objects (or raw vectors) into a (P, R) matrix."""
    rows = [r.vector() if isinstance(r, RegressionOutput) else np.asarray(r, np.float64)
            for r in regs]
    if not rows:
        return np.zeros((0, 0), dtype=np.float64)
    return np.stack(rows)


def l1_regression_loss(pred, target) -> float:
    """Mean absolute error over all regression components."""
    a = regression_matrix(pred) if isinstance(pred, (list, tuple)) else np.asarray(pred, np.float64)
    b = regression_matrix(target) if isinstance(target, (list, tuple)) else np.asarray(target, np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} vs target {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).mean())


def l1_regression_grad(pred, target) -> np.ndarray:
    """Subgradient of l1_regression_loss w.r.t. the predictions."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} vs target {b.shape}")
    return np.sign(a - b) / a.size


def query_voxel_center(voxel: tuple[int, int], grid: GridConfig,
                       stride: int = HEAD_STRIDE) -> tuple[float, float]:
    """Metric center of a stride-8 cell on the input grid."""
    return (
        grid.range_min[0] + (voxel[0] + 0.5) * stride * grid.voxel_size[0],
        grid.range_min[1] + (voxel[1] + 0.5) * stride * grid.voxel_size[1],
    )


def decode_boxes(selected: list[QueryVoxel], regressions: list[RegressionOutput],
                 grid: GridConfig, stride: int = HEAD_STRIDE,
                 frame_id: int = 0) -> list[Detection]:
    """Invert the regression encoding into metric boxes.

    atan2(0, 0) decodes to yaw 0 (degenerate but deterministic); sizes come
    out of exp so they are always positive.
    """
    if len(selected) != len(regressions):
        raise ShapeMismatch(f"{len(selected)} selections vs {len(regressions)} regressions")
    dets = []
    for q, r in zip(selected, regressions):
        cx = grid.range_min[0] + (q.coord[0] + 0.5 + r.dx) * stride * grid.voxel_size[0]
        cy = grid.range_min[1] + (q.coord[1] + 0.5 + r.dy) * stride * grid.voxel_size[1]
        vel = None
        if r.vx is not None:
            vel = (float(r.vx), float(r.vy))
        dets.append(Detection(
            class_id=q.class_id,
            score=q.score,
            center=(float(cx), float(cy), float(r.z)),
            size=(math.exp(r.log_l), math.exp(r.log_w), math.exp(r.log_h)),
            yaw=math.atan2(r.sin_yaw, r.cos_yaw),
            velocity=vel,
            query_voxel=q.coord,
            query_pos=query_voxel_center(q.coord, grid, stride),
            frame_id=frame_id,
        ))
    return dets
