"""Desk-scale evaluation: rotated-box IoU, greedy matching, precision/recall."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DegenerateBox


def box_corners(cx: float, cy: float, length: float, width: float, yaw: float):
    """Counter-clockwise BEV corners, starting front-left in the box frame."""
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = length / 2.0, width / 2.0
    local = ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy))
    return [(cx + c * px - s * py, cy + s * px + c * py) for px, py in local]


def _polygon_area(pts) -> float:
    n = len(pts)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def _clip_polygon(subject, a, b):
    """Keep the part of ``subject`` left of the directed edge a -> b."""
    def inside(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0

    def intersect(p, q):
        dx1, dy1 = q[0] - p[0], q[1] - p[1]
        dx2, dy2 = b[0] - a[0], b[1] - a[1]
        den = dx1 * dy2 - dy1 * dx2
        if den == 0.0:
            return q
        t = ((a[0] - p[0]) * dy2 - (a[1] - p[1]) * dx2) / den
        return (p[0] + t * dx1, p[1] + t * dy1)

    out = []
    n = len(subject)
    for i in range(n):
        cur = subject[i]
        prev = subject[i - 1]
        if inside(cur):
            if not inside(prev):
                out.append(intersect(prev, cur))
            out.append(cur)
        elif inside(prev):
            out.append(intersect(prev, cur))
    return out


def intersection_area(poly_a, poly_b) -> float:
    """Convex polygon intersection area (Sutherland-Hodgman clipping)."""
    clipped = list(poly_a)
    nb = len(poly_b)
    for i in range(nb):
        if not clipped:
            return 0.0
        clipped = _clip_polygon(clipped, poly_b[i], poly_b[(i + 1) % nb])
    return _polygon_area(clipped)


def _check_box(box):
    if any(s <= 0 for s in box.size):
        raise DegenerateBox(f"box size must be positive, got {box.size}")


def iou_bev(box_a, box_b) -> float:
    """Oriented bird's-eye-view IoU of two boxes (center/size/yaw objects)."""
    _check_box(box_a)
    _check_box(box_b)
    pa = box_corners(box_a.center[0], box_a.center[1], box_a.size[0], box_a.size[1], box_a.yaw)
    pb = box_corners(box_b.center[0], box_b.center[1], box_b.size[0], box_b.size[1], box_b.yaw)
    inter = intersection_area(pa, pb)
    area_a = box_a.size[0] * box_a.size[1]
    area_b = box_b.size[0] * box_b.size[1]
    inter = min(inter, area_a, area_b)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(box_a, box_b) -> float:
    """3D IoU of upright boxes: BEV intersection times the z overlap.

    Exact for upright boxes because the 3D intersection volume factors into
    footprint area times height overlap.
    """
    _check_box(box_a)
    _check_box(box_b)
    pa = box_corners(box_a.center[0], box_a.center[1], box_a.size[0], box_a.size[1], box_a.yaw)
    pb = box_corners(box_b.center[0], box_b.center[1], box_b.size[0], box_b.size[1], box_b.yaw)
    inter_area = intersection_area(pa, pb)
    za0 = box_a.center[2] - box_a.size[2] / 2.0
    za1 = box_a.center[2] + box_a.size[2] / 2.0
    zb0 = box_b.center[2] - box_b.size[2] / 2.0
    zb1 = box_b.center[2] + box_b.size[2] / 2.0
    zo = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_area * zo
    vol_a = box_a.size[0] * box_a.size[1] * box_a.size[2]
    vol_b = box_b.size[0] * box_b.size[1] * box_b.size[2]
    inter = min(inter, vol_a, vol_b)
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        # no detections at all: 1.0 by convention (0/0)
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 1.0

    @property
    def recall(self) -> float:
        # no ground truth: 1.0 by convention
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 1.0


@dataclass
class EvalReport:
    """Greedy-matching detection scores at a fixed IoU threshold."""

    iou_threshold: float
    per_class: dict[int, ClassStats] = field(default_factory=dict)
    id_switches: int | None = None

    def stats(self, class_id: int) -> ClassStats:
        return self.per_class.setdefault(class_id, ClassStats())

    @property
    def mean_precision(self) -> float:
        if not self.per_class:
            return 1.0
        return sum(s.precision for s in self.per_class.values()) / len(self.per_class)

    @property
    def mean_recall(self) -> float:
        if not self.per_class:
            return 1.0
        return sum(s.recall for s in self.per_class.values()) / len(self.per_class)

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "per_class": {
                str(k): {"tp": s.tp, "fp": s.fp, "fn": s.fn,
                         "precision": s.precision, "recall": s.recall}
                for k, s in sorted(self.per_class.items())
            },
            "mean_precision": self.mean_precision,
            "mean_recall": self.mean_recall,
            "id_switches": self.id_switches,
        }


def match_and_score(dets, gts, iou_thresh: float, use_3d: bool = False) -> EvalReport:
    """Greedy score-descending matching of one frame at IoU >= threshold.

    Each ground-truth box is matched at most once, within its class. For
    sequences, evaluate per frame and combine with merge_reports.
    """
    iou_fn = iou_3d if use_3d else iou_bev
    report = EvalReport(iou_threshold=iou_thresh)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: set[int] = set()
    for i in order:
        d = dets[i]
        best_iou = 0.0
        best_j = -1
        for j, g in enumerate(gts):
            if j in taken or g.class_id != d.class_id:
                continue
            iou = iou_fn(d, g)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        stats = report.stats(d.class_id)
        if best_j >= 0 and best_iou >= iou_thresh:
            taken.add(best_j)
            stats.tp += 1
        else:
            stats.fp += 1
    for j, g in enumerate(gts):
        if j not in taken:
            report.stats(g.class_id).fn += 1
    return report


def merge_reports(reports) -> EvalReport:
    """Sum per-class counts of per-frame reports into one."""
    reports = list(reports)
    if not reports:
        return EvalReport(iou_threshold=0.0)
    merged = EvalReport(iou_threshold=reports[0].iou_threshold)
    for rep in reports:
        for k, s in rep.per_class.items():
            ms = merged.stats(k)
            ms.tp += s.tp
            ms.fp += s.fp
            ms.fn += s.fn
    return merged


def evaluate_files(dets_dir, gt_path, grid, iou_thresh: float,
                   out_path=None, use_3d: bool = False) -> EvalReport:
    """Score a directory of per-frame detection JSON files against a
    ground-truth JSON, optionally writing the EvalReport as JSON."""
    import json
    from pathlib import Path

    from .formats import read_detections
    from .scene import gt_from_record

    with open(gt_path) as fh:
        gt_doc = json.load(fh)
    gt_by_frame = {int(f["frame_id"]): [gt_from_record(r) for r in f["boxes"]]
                   for f in gt_doc["frames"]}
    reports = []
    for path in sorted(Path(dets_dir).glob("*.json")):
        frame_id, _, dets = read_detections(path, grid)
        gts = gt_by_frame.get(frame_id, [])
        reports.append(match_and_score(dets, gts, iou_thresh, use_3d=use_3d))
    merged = merge_reports(reports)
    merged.iou_threshold = iou_thresh
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(merged.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return merged
