"""Multi-object tracking by two-pass greedy association.

Pass 1 matches velocity-predicted track centers to detection centers; pass 2
matches the query-voxel positions of whatever is left, rescuing pairs whose
predicted centers drifted apart. Both passes gate on L2 distance and run
class-by-class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonMonotoneTimestamp

ACTIVE = "active"
DEAD = "dead"


@dataclass
class Track:
    """Persistent object identity; mutated frame-sequentially by Tracker."""

    track_id: int
    class_id: int
    center: np.ndarray          # (2,) m
    velocity: np.ndarray        # (2,) m/s
    query_pos: np.ndarray       # (2,) m, metric query-voxel position
    age: int = 0                # frames since last update
    hits: int = 1
    state: str = ACTIVE


@dataclass
class AssociationConfig:
    """Gates and lifecycle parameters for the tracker."""

    center_gate: float = 2.0
    class_center_gates: dict[int, float] = field(default_factory=dict)
    voxel_gate: float = 2.0
    max_age: int = 3
    min_hits: int = 1
    use_voxel_association: bool = True

    def __post_init__(self):
        if self.center_gate <= 0 or self.voxel_gate <= 0:
            raise ValueError("association gates must be positive")

    def gate_for(self, class_id: int) -> float:
        return self.class_center_gates.get(class_id, self.center_gate)


@dataclass(frozen=True)
class TrackOutput:
    """Per-frame snapshot of one confirmed track."""

    track_id: int
    class_id: int
    center: tuple[float, float]
    velocity: tuple[float, float]


def _greedy(candidates, used_tracks, used_dets, matches):
    # candidates sorted by (distance, det index, track index)
    for _, di, ti in candidates:
        if ti in used_tracks or di in used_dets:
            continue
        used_tracks.add(ti)
        used_dets.add(di)
        matches.append((ti, di))


def associate(tracks, dets, dt: float, cfg: AssociationConfig):
    """Two-pass greedy matching within each class.

    Returns (matches, unmatched_track_indices, unmatched_det_indices);
    matches are (track_index, det_index) pairs into the given lists. Ties in
    distance resolve to the lower detection index, then lower track index.
    """
    if dt <= 0:
        raise NonMonotoneTimestamp(f"dt must be positive, got {dt}")
    matches: list[tuple[int, int]] = []
    used_t: set[int] = set()
    used_d: set[int] = set()

    pass1 = []
    for ti, tr in enumerate(tracks):
        pred = tr.center + tr.velocity * dt
        gate = cfg.gate_for(tr.class_id)
        for di, d in enumerate(dets):
            if d.class_id != tr.class_id:
                continue
            dist = float(np.hypot(pred[0] - d.center[0], pred[1] - d.center[1]))
            if dist <= gate:
                pass1.append((dist, di, ti))
    _greedy(sorted(pass1), used_t, used_d, matches)

    if cfg.use_voxel_association:
        pass2 = []
        for ti, tr in enumerate(tracks):
            if ti in used_t:
                continue
            for di, d in enumerate(dets):
                if di in used_d or d.class_id != tr.class_id:
                    continue
                dist = float(np.hypot(tr.query_pos[0] - d.query_pos[0],
                                      tr.query_pos[1] - d.query_pos[1]))
                if dist <= cfg.voxel_gate:
                    pass2.append((dist, di, ti))
        _greedy(sorted(pass2), used_t, used_d, matches)

    unmatched_t = [ti for ti in range(len(tracks)) if ti not in used_t]
    unmatched_d = [di for di in range(len(dets)) if di not in used_d]
    return matches, unmatched_t, unmatched_d


class Tracker:
    """Frame-sequential track manager. Single-owner state, not thread safe;
    run independent sequences with independent Tracker instances."""

    def __init__(self, cfg: AssociationConfig | None = None):
        self.cfg = cfg if cfg is not None else AssociationConfig()
        self.tracks: list[Track] = []
        self._next_id = 1

    @property
    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.state == ACTIVE]

    def step(self, dets, dt: float) -> list[TrackOutput]:
        """Advance one frame: update matches, age misses, spawn births.

        Returns the confirmed tracks updated this frame. Track ids increase
        strictly across births and are never reused; dead tracks stay dead.
        """
        if dt <= 0:
            raise NonMonotoneTimestamp(f"frames must advance in time, got dt={dt}")
        active = self.active_tracks
        matches, unmatched_t, unmatched_d = associate(active, dets, dt, self.cfg)

        for ti, di in matches:
            tr = active[ti]
            d = dets[di]
            new_center = np.array([d.center[0], d.center[1]], dtype=np.float64)
            if d.velocity is not None:
                tr.velocity = np.array(d.velocity, dtype=np.float64)
            else:
                tr.velocity = (new_center - tr.center) / dt
            tr.center = new_center
            tr.query_pos = np.array(d.query_pos, dtype=np.float64)
            tr.age = 0
            tr.hits += 1

        for ti in unmatched_t:
            tr = active[ti]
            tr.age += 1
            if tr.age > self.cfg.max_age:
                tr.state = DEAD

        for di in unmatched_d:
            d = dets[di]
            vel = d.velocity if d.velocity is not None else (0.0, 0.0)
            self.tracks.append(Track(
                track_id=self._next_id,
                class_id=d.class_id,
                center=np.array([d.center[0], d.center[1]], dtype=np.float64),
                velocity=np.array(vel, dtype=np.float64),
                query_pos=np.array(d.query_pos, dtype=np.float64),
            ))
            self._next_id += 1

        return [
            TrackOutput(t.track_id, t.class_id,
                        (float(t.center[0]), float(t.center[1])),
                        (float(t.velocity[0]), float(t.velocity[1])))
            for t in self.tracks
            if t.state == ACTIVE and t.age == 0 and t.hits >= self.cfg.min_hits
        ]


def count_id_switches(gt_frames, track_frames, max_dist: float = float("inf")) -> int:
    """Frames where a ground-truth object's matched track id changed.

    Both arguments map frame index -> list of (id, x, y). Per frame,
    ground-truth objects are greedily matched to track outputs by ascending
    center distance (gated by max_dist); a switch is counted whenever an
    object's matched id differs from the id it last matched.
    """
    last_id: dict = {}
    switches = 0
    for f in sorted(gt_frames):
        gts = gt_frames[f]
        trs = track_frames.get(f, [])
        cand = []
        for gi, (gid, gx, gy) in enumerate(gts):
            for tj, (tid, tx, ty) in enumerate(trs):
                dist = float(np.hypot(gx - tx, gy - ty))
                if dist <= max_dist:
                    cand.append((dist, gi, tj))
        used_g: set[int] = set()
        used_t: set[int] = set()
        for _, gi, tj in sorted(cand):
            if gi in used_g or tj in used_t:
                continue
            used_g.add(gi)
            used_t.add(tj)
            gid = gts[gi][0]
            tid = trs[tj][0]
            if gid in last_id and last_id[gid] != tid:
                switches += 1
            last_id[gid] = tid
    return switches
