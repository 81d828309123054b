"""Built-in property suite behind `svx selftest`.

Each check pairs an engine operation with a small local reference
implementation (dense grids, O(N^2) scans, scalar loops) so a broken build
fails loudly without needing the test repository.
"""

from __future__ import annotations

import math

import numpy as np

from . import head, metrics, sparse, tracker
from .head import GroundTruthBox, HeadConfig
from .voxelize import GridConfig


def _random_tensor(rng, extent, n_sites, channels, stride=1):
    total = int(np.prod(extent))
    n = min(n_sites, total)
    keys = rng.choice(total, size=n, replace=False)
    coords = sparse._keys_to_coords(np.sort(keys), extent)
    feats = rng.normal(0, 1, size=(n, channels)).astype(np.float32)
    return sparse._tensor(coords, feats, stride, extent)


def _dense(t):
    grid = np.zeros(t.extent + (t.num_channels,), dtype=np.float64)
    for row, c in enumerate(t.coords):
        grid[tuple(c)] = t.features[row]
    return grid


def _check_submanifold(rng) -> bool:
    extent = (8, 8, 8)
    t = _random_tensor(rng, extent, 60, 3)
    layer = sparse.ConvLayer(rng.normal(0, 1, (3, 3, 3, 3, 2)).astype(np.float32),
                             rng.normal(0, 1, 2).astype(np.float32))
    out = sparse.submanifold_conv(t, layer)
    if out.coord_set() != t.coord_set():
        return False
    dense = _dense(t)
    ref = np.zeros(extent + (2,))
    for off in sparse._kernel_offsets(3, 3):
        for row, c in enumerate(t.coords):
            q = c + off
            if np.all(q >= 0) and np.all(q < extent):
                ref[tuple(c)] += dense[tuple(q)] @ layer.weights[tuple(off + 1)].astype(np.float64)
    ref += layer.bias
    err = max(abs(float(ref[tuple(c)][ch]) - float(out.features[row, ch]))
              for row, c in enumerate(out.coords) for ch in range(2))
    return err <= 1e-5


def _check_strided(rng) -> bool:
    extent = (9, 9, 9)
    t = _random_tensor(rng, extent, 70, 2)
    layer = sparse.ConvLayer(rng.normal(0, 1, (3, 3, 3, 2, 2)).astype(np.float32),
                             rng.normal(0, 1, 2).astype(np.float32), mode=sparse.STRIDED)
    out = sparse.strided_conv_downsample(t, layer)
    ref: dict[tuple, np.ndarray] = {}
    for off in sparse._kernel_offsets(3, 3):
        w = layer.weights[tuple(off + 1)].astype(np.float64)
        for row, c in enumerate(t.coords):
            q = c + off
            if np.all(q >= 0) and np.all(q < extent):
                key = tuple(q // 2)
                ref.setdefault(key, np.zeros(2)).__iadd__(t.features[row].astype(np.float64) @ w)
    if out.coord_set() != set(ref):
        return False
    err = max(abs(float(ref[tuple(c)][ch] + layer.bias[ch]) - float(out.features[row, ch]))
              for row, c in enumerate(out.coords) for ch in range(2))
    return out.stride == 2 and err <= 1e-4


def _check_dilation_cardinality(rng) -> bool:
    from fractions import Fraction

    extent = (10, 10, 10)
    for n in (1, 7, 10, 33):
        t = _random_tensor(rng, extent, n, 4)
        for ratio in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9):
            expected = math.ceil((1 - Fraction(str(ratio))) * t.num_sites)
            if len(sparse.select_dilation_set(t, ratio)) != expected:
                return False
    return True


def _check_max_pool(rng) -> bool:
    extent = (16, 16)
    t = _random_tensor(rng, extent, 80, 1)
    got = sparse.sparse_max_pool(t, 3)
    want = set()
    for i, c in enumerate(t.coords):
        beaten = False
        for j, c2 in enumerate(t.coords):
            if i == j or np.abs(c2 - c).max() > 1:
                continue
            si, sj = t.features[i, 0], t.features[j, 0]
            if sj > si or (sj == si and j < i):
                beaten = True
                break
        if not beaten:
            want.add(tuple(int(v) for v in c))
    return got == want


def _check_height_compress(rng) -> bool:
    extent = (6, 6, 6)
    t = _random_tensor(rng, extent, 50, 3)
    out = sparse.height_compress(t)
    ref = _dense(t).sum(axis=2)
    for row, c in enumerate(out.coords):
        if abs(ref[c[0], c[1]] - out.features[row].astype(np.float64)).max() > 1e-5:
            return False
    # integer-valued features add exactly, so mass conservation is exact
    ti = sparse.with_features(t, rng.integers(-8, 9, size=(t.num_sites, 3)).astype(np.float32))
    ci = sparse.height_compress(ti)
    return bool(np.array_equal(ti.features.sum(axis=0), ci.features.sum(axis=0)))


def _check_encode_decode(rng) -> bool:
    grid = GridConfig()
    cfg = HeadConfig(num_classes=2)
    coords = np.stack([rng.integers(0, 180, 60), rng.integers(0, 180, 60)], axis=1)
    fc = sparse.build_sparse_tensor(coords, np.ones((60, 1), np.float32), 8, (180, 180), merge=True)
    for _ in range(50):
        box = GroundTruthBox(
            class_id=int(rng.integers(0, 2)),
            center=(float(rng.uniform(-50, 50)), float(rng.uniform(-50, 50)),
                    float(rng.uniform(-3, 2))),
            size=tuple(float(v) for v in rng.uniform(0.5, 6.0, 3)),
            yaw=float(rng.uniform(-np.pi, np.pi)),
            velocity=(float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5))),
        )
        assign = head.assign_targets([box], fc, grid, cfg)
        p = assign.positives[0]
        reg = head.RegressionOutput.from_vector(p.target)
        sel = head.QueryVoxel(p.voxel, box.class_id, 1.0, p.row)
        det = head.decode_boxes([sel], [reg], grid)[0]
        if max(abs(det.center[i] - box.center[i]) for i in range(3)) > 1e-5:
            return False
        if max(abs(det.size[i] - box.size[i]) for i in range(3)) > 1e-5:
            return False
        dyaw = (det.yaw - box.yaw + np.pi) % (2 * np.pi) - np.pi
        if abs(dyaw) > 1e-5:
            return False
    return True


def _check_losses(rng) -> bool:
    # 0.25 * 0.5**2 * (-ln 0.5) at a positive scored 0.5
    want = 0.25 * 0.25 * math.log(2.0)
    if abs(head.focal_loss([[0.5]], [[1.0]]) - want) > 1e-9:
        return False
    p = rng.uniform(0.05, 0.95, size=(4, 3))
    t = (rng.uniform(size=(4, 3)) < 0.3).astype(float)
    ref = 0.0
    for i in range(4):
        for j in range(3):
            if t[i, j] > 0.5:
                ref += -0.25 * (1 - p[i, j]) ** 2 * math.log(p[i, j])
            else:
                ref += -0.75 * p[i, j] ** 2 * math.log(1 - p[i, j])
    ref /= 12
    if abs(head.focal_loss(p, t) - ref) > 1e-9:
        return False
    a = rng.normal(size=(5, 8))
    b = rng.normal(size=(5, 8))
    ref = sum(abs(a[i, j] - b[i, j]) for i in range(5) for j in range(8)) / 40
    return abs(head.l1_regression_loss(a, b) - ref) <= 1e-9


def _check_tracking(rng) -> bool:
    trk = tracker.Tracker(tracker.AssociationConfig(center_gate=2.0, voxel_gate=2.0))
    objects = [((0.0, 0.0), (1.0, 0.0)), ((10.0, 5.0), (0.0, -1.0)), ((-8.0, 3.0), (0.5, 0.5))]
    seen = set()
    for f in range(10):
        dets = []
        for k, ((x, y), (vx, vy)) in enumerate(objects):
            cx, cy = x + vx * f * 0.5, y + vy * f * 0.5
            dets.append(head.Detection(
                class_id=0, score=0.9, center=(cx, cy, 0.0), size=(4.0, 2.0, 1.5),
                yaw=0.0, velocity=(vx, vy), query_voxel=(0, 0),
                query_pos=(cx - 1.0, cy - 0.5)))
        outputs = trk.step(dets, 0.5)
        if len(outputs) != 3:
            return False
        seen.update(o.track_id for o in outputs)
    gt = {f: [(k, x + vx * f * 0.5, y + vy * f * 0.5)
              for k, ((x, y), (vx, vy)) in enumerate(objects)] for f in range(10)}
    trks = {f: [] for f in range(10)}
    trk2 = tracker.Tracker(tracker.AssociationConfig())
    for f in range(10):
        dets = []
        for k, ((x, y), (vx, vy)) in enumerate(objects):
            cx, cy = x + vx * f * 0.5, y + vy * f * 0.5
            dets.append(head.Detection(0, 0.9, (cx, cy, 0.0), (4.0, 2.0, 1.5), 0.0,
                                       (vx, vy), (0, 0), (cx - 1.0, cy - 0.5)))
        trks[f] = [(o.track_id, o.center[0], o.center[1]) for o in trk2.step(dets, 0.5)]
    return len(seen) == 3 and tracker.count_id_switches(gt, trks) == 0


def _check_iou(rng) -> bool:
    a = GroundTruthBox(0, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
    b = GroundTruthBox(0, (0.5, 0.0, 0.0), (1.0, 1.0, 1.0), 0.0)
    if abs(metrics.iou_bev(a, a) - 1.0) > 1e-9:
        return False
    return abs(metrics.iou_bev(a, b) - 1.0 / 3.0) <= 1e-9


CHECKS = (
    ("submanifold conv vs dense reference", _check_submanifold),
    ("strided conv vs scatter reference", _check_strided),
    ("dilation set cardinality", _check_dilation_cardinality),
    ("sparse max pool vs O(N^2) scan", _check_max_pool),
    ("height compression vs dense z-sum", _check_height_compress),
    ("box encode/decode round trip", _check_encode_decode),
    ("loss functions vs scalar loops", _check_losses),
    ("constant-velocity tracking", _check_tracking),
    ("rotated IoU analytic cases", _check_iou),
)


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        rng = np.random.default_rng(1234)
        passed = fn(rng)
        ok &= passed
        if verbose:
            print(f"selftest: {name}: {'ok' if passed else 'FAIL'}")
    return ok
