import math

import numpy as np
import pytest

from svx.errors import InactiveQuery, NoActiveVoxels, ShapeMismatch
from svx.head import (
    GroundTruthBox,
    GroupWeights,
    HeadConfig,
    HeadWeights,
    QueryVoxel,
    RegressionOutput,
    assign_targets,
    classify_voxels,
    decode_boxes,
    focal_loss,
    focal_loss_logit_grad,
    l1_regression_loss,
    l1_regression_grad,
    regress_boxes,
    select_query_voxels,
)
from svx.sparse import ConvLayer, build_sparse_tensor, with_features
from svx.voxelize import GridConfig

import oracles

GRID = GridConfig()


def head_layer(rng, k, cin, cout):
    return ConvLayer(rng.normal(0, 0.5, (k, k, cin, cout)).astype(np.float32),
                     rng.normal(0, 0.5, cout).astype(np.float32))


def make_weights(rng, cfg, cin):
    groups = []
    for classes in cfg.class_groups:
        groups.append(GroupWeights(
            cls=head_layer(rng, cfg.head_kernel, cin, len(classes)),
            reg=head_layer(rng, cfg.head_kernel, cin, cfg.num_reg_channels),
        ))
    return HeadWeights(tuple(groups))


def zero_weights(cfg, cin):
    groups = []
    for classes in cfg.class_groups:
        k = cfg.head_kernel
        groups.append(GroupWeights(
            cls=ConvLayer(np.zeros((k, k, cin, len(classes)), np.float32),
                          np.zeros(len(classes), np.float32)),
            reg=ConvLayer(np.zeros((k, k, cin, cfg.num_reg_channels), np.float32),
                          np.zeros(cfg.num_reg_channels, np.float32)),
        ))
    return HeadWeights(tuple(groups))


class TestClassify:
    def test_empty(self):
        cfg = HeadConfig(num_classes=2, head_kernel=1)
        fc = build_sparse_tensor([], np.zeros((0, 8), np.float32), 8, (32, 32))
        rng = np.random.default_rng(50)
        scores = classify_voxels(fc, make_weights(rng, cfg, 8), cfg)
        assert scores.num_sites == 0
        assert scores.num_channels == 2

    def test_zero_weights_give_half(self):
        rng = np.random.default_rng(51)
        cfg = HeadConfig(num_classes=3)
        fc = oracles.random_tensor(rng, (32, 32), 50, 8, stride=8)
        scores = classify_voxels(fc, zero_weights(cfg, 8), cfg)
        np.testing.assert_array_equal(scores.features,
                                      np.full((50, 3), 0.5, np.float32))

    def test_k1_matches_affine_sigmoid_oracle(self):
        rng = np.random.default_rng(52)
        cfg = HeadConfig(num_classes=3, head_kernel=1,
                         class_groups=((0, 1, 2),), maxpool_kernel=(3,))
        fc = oracles.random_tensor(rng, (32, 32), 60, 8, stride=8)
        weights = make_weights(rng, cfg, 8)
        scores = classify_voxels(fc, weights, cfg)
        w = weights.groups[0].cls.weights[0, 0].astype(np.float64)
        b = weights.groups[0].cls.bias.astype(np.float64)
        for row in range(fc.num_sites):
            z = fc.features[row].astype(np.float64) @ w + b
            np.testing.assert_allclose(scores.features[row], 1 / (1 + np.exp(-z)),
                                       atol=1e-6)

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(53)
        cfg = HeadConfig(num_classes=2)
        fc = oracles.random_tensor(rng, (32, 32), 80, 8, stride=8)
        scores = classify_voxels(fc, make_weights(rng, cfg, 8), cfg)
        assert (scores.features > 0).all()
        assert (scores.features < 1).all()


def brute_select(scores, cfg):
    picked = []
    for k in range(cfg.num_classes):
        kernel = cfg.maxpool_kernel[cfg.group_of_class[k]]
        keep = oracles.brute_local_argmax(scores.coords, scores.features[:, k], kernel)
        for row, c in enumerate(scores.coords):
            coord = (int(c[0]), int(c[1]))
            if coord in keep and scores.features[row, k] >= cfg.score_threshold:
                picked.append((coord, k, float(scores.features[row, k]), row))
    picked.sort(key=lambda p: (-p[2], p[1], p[3]))
    return [(p[0], p[1], p[2]) for p in picked[: cfg.max_detections]]


class TestSelect:
    def test_all_below_threshold(self):
        cfg = HeadConfig(num_classes=1, score_threshold=0.9)
        fc = build_sparse_tensor([(3, 3)], [[0.2]], 8, (32, 32))
        assert select_query_voxels(fc, cfg) == []

    def test_single_isolated_voxel(self):
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([(3, 3)], [[0.7]], 8, (32, 32))
        got = select_query_voxels(fc, cfg)
        assert len(got) == 1
        assert got[0].coord == (3, 3)
        assert got[0].class_id == 0

    def test_matches_bruteforce_two_classes(self):
        rng = np.random.default_rng(54)
        cfg = HeadConfig(num_classes=2, class_groups=((0,), (1,)),
                         maxpool_kernel=(3, 5), score_threshold=0.1,
                         max_detections=40)
        t = oracles.random_tensor(rng, (24, 24), 150, 2, stride=8)
        scores = with_features(t, 1 / (1 + np.exp(-t.features)))
        got = [(q.coord, q.class_id, q.score) for q in select_query_voxels(scores, cfg)]
        assert got == brute_select(scores, cfg)

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(55)
        t = oracles.random_tensor(rng, (24, 24), 120, 1, stride=8)
        scores = with_features(t, 1 / (1 + np.exp(-t.features)))
        counts = []
        for thr in (0.1, 0.3, 0.5, 0.7):
            cfg = HeadConfig(num_classes=1, score_threshold=thr)
            counts.append(len(select_query_voxels(scores, cfg)))
        assert counts == sorted(counts, reverse=True)

    def test_truncates_to_max_detections(self):
        rng = np.random.default_rng(56)
        t = oracles.random_tensor(rng, (32, 32), 200, 1, stride=8)
        scores = with_features(t, np.full((200, 1), 0.9, np.float32))
        cfg = HeadConfig(num_classes=1, maxpool_kernel=(1,), max_detections=7)
        assert len(select_query_voxels(scores, cfg)) == 7


class TestRegress:
    def test_empty_selection(self):
        rng = np.random.default_rng(57)
        cfg = HeadConfig(num_classes=1)
        fc = oracles.random_tensor(rng, (32, 32), 30, 8, stride=8)
        assert regress_boxes(fc, [], make_weights(rng, cfg, 8), cfg) == []

    def test_zero_weights_decode_to_voxel_center(self):
        rng = np.random.default_rng(58)
        cfg = HeadConfig(num_classes=1)
        fc = oracles.random_tensor(rng, (32, 32), 30, 8, stride=8)
        sel = [QueryVoxel((int(fc.coords[0, 0]), int(fc.coords[0, 1])), 0, 0.9, 0)]
        regs = regress_boxes(fc, sel, zero_weights(cfg, 8), cfg)
        det = decode_boxes(sel, regs, GRID)[0]
        cx = GRID.range_min[0] + (sel[0].coord[0] + 0.5) * 8 * GRID.voxel_size[0]
        cy = GRID.range_min[1] + (sel[0].coord[1] + 0.5) * 8 * GRID.voxel_size[1]
        assert det.center == pytest.approx((cx, cy, 0.0))
        assert det.size == pytest.approx((1.0, 1.0, 1.0))
        assert det.yaw == 0.0  # atan2(0, 0) decodes to 0

    def test_k3_matches_dense_oracle_at_sites(self):
        rng = np.random.default_rng(59)
        cfg = HeadConfig(num_classes=1, regress_velocity=True)
        fc = oracles.random_tensor(rng, (16, 16), 80, 4, stride=8)
        weights = make_weights(rng, cfg, 4)
        sel = [QueryVoxel((int(fc.coords[r, 0]), int(fc.coords[r, 1])), 0, 0.5, int(r))
               for r in (0, 5, 17, 40)]
        regs = regress_boxes(fc, sel, weights, cfg)
        layer = weights.groups[0].reg
        ref = oracles.dense_submanifold(oracles.densify(fc), layer.weights, layer.bias)
        for q, reg in zip(sel, regs):
            np.testing.assert_allclose(reg.vector(), ref[q.coord], atol=1e-5)

    def test_inactive_query(self):
        rng = np.random.default_rng(60)
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([(3, 3)], np.ones((1, 8), np.float32), 8, (32, 32))
        with pytest.raises(InactiveQuery):
            regress_boxes(fc, [QueryVoxel((9, 9), 0, 0.5, 0)],
                          make_weights(rng, cfg, 8), cfg)


class TestAssign:
    def test_exact_center_gives_zero_offsets(self):
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([(10, 20)], np.ones((1, 4), np.float32), 8, (180, 180))
        cx = GRID.range_min[0] + 10.5 * 8 * GRID.voxel_size[0]
        cy = GRID.range_min[1] + 20.5 * 8 * GRID.voxel_size[1]
        box = GroundTruthBox(0, (cx, cy, 0.5), (4.0, 2.0, 1.5), 0.3)
        assign = assign_targets([box], fc, GRID, cfg)
        p = assign.positives[0]
        assert p.voxel == (10, 20)
        assert p.target[0] == pytest.approx(0.0, abs=1e-9)
        assert p.target[1] == pytest.approx(0.0, abs=1e-9)

    def test_nearer_voxel_wins(self):
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([(10, 10), (14, 10)], np.ones((2, 4), np.float32),
                                 8, (180, 180))
        cx = GRID.range_min[0] + 11.0 * 8 * GRID.voxel_size[0]
        cy = GRID.range_min[1] + 10.5 * 8 * GRID.voxel_size[1]
        box = GroundTruthBox(0, (cx, cy, 0.0), (1.0, 1.0, 1.0), 0.0)
        assign = assign_targets([box], fc, GRID, cfg)
        assert assign.positives[0].voxel == (10, 10)

    def test_matches_bruteforce_nn(self):
        rng = np.random.default_rng(61)
        cfg = HeadConfig(num_classes=3)
        fc_coords = np.stack([rng.integers(0, 180, 100), rng.integers(0, 180, 100)], 1)
        fc = build_sparse_tensor(fc_coords, np.ones((100, 4), np.float32),
                                 8, (180, 180), merge=True)
        boxes = [
            GroundTruthBox(int(rng.integers(0, 3)),
                           (float(rng.uniform(-50, 50)), float(rng.uniform(-50, 50)),
                            float(rng.uniform(-2, 2))),
                           tuple(float(v) for v in rng.uniform(0.5, 5, 3)),
                           float(rng.uniform(-3, 3)))
            for _ in range(5)
        ]
        assign = assign_targets(boxes, fc, GRID, cfg)
        for gi, box in enumerate(boxes):
            row, _ = oracles.brute_nearest_voxel(box.center, fc.coords, GRID)
            assert assign.positives[gi].row == row
        assert assign.cls_target.sum() <= len(boxes)
        for p in assign.positives:
            assert assign.cls_target[p.row, p.class_id] == 1.0

    def test_shared_voxel_ownership(self):
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([(10, 10)], np.ones((1, 4), np.float32), 8, (180, 180))
        cx = GRID.range_min[0] + 10.5 * 8 * GRID.voxel_size[0]
        cy = GRID.range_min[1] + 10.5 * 8 * GRID.voxel_size[1]
        near = GroundTruthBox(0, (cx, cy, 0.0), (1.0, 1.0, 1.0), 0.0)
        far = GroundTruthBox(0, (cx + 1.0, cy, 0.0), (1.0, 1.0, 1.0), 0.0)
        assign = assign_targets([far, near], fc, GRID, cfg)
        assert assign.positives[0].voxel == assign.positives[1].voxel
        assert assign.positives[1].owns_voxel      # nearer box
        assert not assign.positives[0].owns_voxel

    def test_no_active_voxels(self):
        cfg = HeadConfig(num_classes=1)
        fc = build_sparse_tensor([], np.zeros((0, 4), np.float32), 8, (180, 180))
        with pytest.raises(NoActiveVoxels):
            assign_targets([GroundTruthBox(0, (0, 0, 0), (1, 1, 1), 0.0)], fc, GRID, cfg)


class TestLosses:
    def test_perfect_prediction_limit(self):
        assert focal_loss([[1.0 - 1e-12]], [[1.0]]) == pytest.approx(0.0, abs=1e-9)

    def test_half_score_positive_spot_value(self):
        want = 0.25 * 0.5 ** 2 * math.log(2.0)
        assert focal_loss([[0.5]], [[1.0]]) == pytest.approx(want, abs=1e-9)
        assert want == pytest.approx(0.043322, abs=1e-6)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(62)
        p = rng.uniform(0.02, 0.98, size=(6, 4))
        t = (rng.uniform(size=(6, 4)) < 0.25).astype(float)
        assert focal_loss(p, t) == pytest.approx(oracles.scalar_focal(p, t), abs=1e-6)

    def test_l1_examples(self):
        assert l1_regression_loss(np.ones((2, 4)), np.ones((2, 4))) == 0.0
        pred = np.zeros((1, 8))
        target = np.zeros((1, 8))
        target[0, 3] = 2.0
        assert l1_regression_loss(pred, target) == pytest.approx(0.25)

    def test_l1_matches_scalar_loop(self):
        rng = np.random.default_rng(63)
        a = rng.normal(size=(7, 10))
        b = rng.normal(size=(7, 10))
        assert l1_regression_loss(a, b) == pytest.approx(oracles.scalar_l1(a, b), abs=1e-9)

    def test_l1_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            l1_regression_loss(np.zeros((2, 8)), np.zeros((3, 8)))

    def test_focal_gradient_finite_difference(self):
        rng = np.random.default_rng(64)
        for _ in range(10):
            z = rng.normal(0, 2, size=(3, 4))
            t = (rng.uniform(size=(3, 4)) < 0.3).astype(float)
            grad = focal_loss_logit_grad(z, t)
            eps = 1e-6
            for i in range(3):
                for j in range(4):
                    zp = z.copy(); zp[i, j] += eps
                    zm = z.copy(); zm[i, j] -= eps
                    fd = (focal_loss(1 / (1 + np.exp(-zp)), t)
                          - focal_loss(1 / (1 + np.exp(-zm)), t)) / (2 * eps)
                    assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_l1_gradient_finite_difference(self):
        rng = np.random.default_rng(65)
        a = rng.normal(size=(4, 8))
        b = rng.normal(size=(4, 8))
        grad = l1_regression_grad(a, b)
        eps = 1e-7
        for i in range(4):
            for j in range(8):
                ap = a.copy(); ap[i, j] += eps
                am = a.copy(); am[i, j] -= eps
                fd = (l1_regression_loss(ap, b) - l1_regression_loss(am, b)) / (2 * eps)
                assert grad[i, j] == pytest.approx(fd, rel=1e-4)


class TestDecode:
    def test_zero_regression_arithmetic(self):
        sel = [QueryVoxel((0, 0), 0, 0.5, 0)]
        regs = [RegressionOutput(0, 0, 0, 0, 0, 0, 0, 0)]
        det = decode_boxes(sel, regs, GRID)[0]
        assert det.center[0] == pytest.approx(-53.7)
        assert det.center[1] == pytest.approx(-53.7)

    def test_yaw_atan2_cases(self):
        sel = [QueryVoxel((0, 0), 0, 0.5, 0)] * 2
        regs = [RegressionOutput(0, 0, 0, 0, 0, 0, 0.0, 1.0),
                RegressionOutput(0, 0, 0, 0, 0, 0, 1.0, 0.0)]
        dets = decode_boxes(sel, regs, GRID)
        assert dets[0].yaw == pytest.approx(0.0)
        assert dets[1].yaw == pytest.approx(math.pi / 2)

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatch):
            decode_boxes([QueryVoxel((0, 0), 0, 0.5, 0)], [], GRID)

    def test_encode_decode_roundtrip(self):
        rng = np.random.default_rng(66)
        cfg = HeadConfig(num_classes=2)
        coords = np.stack([rng.integers(0, 180, 200), rng.integers(0, 180, 200)], 1)
        fc = build_sparse_tensor(coords, np.ones((200, 1), np.float32),
                                 8, (180, 180), merge=True)
        for _ in range(100):
            box = GroundTruthBox(
                int(rng.integers(0, 2)),
                (float(rng.uniform(-53, 53)), float(rng.uniform(-53, 53)),
                 float(rng.uniform(-4, 2))),
                tuple(float(v) for v in rng.uniform(0.3, 8, 3)),
                float(rng.uniform(-math.pi, math.pi)),
                (float(rng.uniform(-8, 8)), float(rng.uniform(-8, 8))),
            )
            assign = assign_targets([box], fc, GRID, cfg)
            p = assign.positives[0]
            det = decode_boxes([QueryVoxel(p.voxel, box.class_id, 1.0, p.row)],
                               [RegressionOutput.from_vector(p.target)], GRID)[0]
            for i in range(3):
                assert det.center[i] == pytest.approx(box.center[i], abs=1e-5)
                assert det.size[i] == pytest.approx(box.size[i], abs=1e-5)
            dyaw = (det.yaw - box.yaw + math.pi) % (2 * math.pi) - math.pi
            assert abs(dyaw) < 1e-5
            assert det.velocity == pytest.approx(box.velocity, abs=1e-9)


class TestPipelineInvariants:
    def test_nms_freeness_and_provenance(self):
        rng = np.random.default_rng(67)
        cfg = HeadConfig(num_classes=2, class_groups=((0,), (1,)),
                         maxpool_kernel=(3, 5), score_threshold=0.05)
        fc = oracles.random_tensor(rng, (24, 24), 180, 8, stride=8)
        weights = make_weights(rng, cfg, 8)
        scores = classify_voxels(fc, weights, cfg)
        selected = select_query_voxels(scores, cfg)
        regs = regress_boxes(fc, selected, weights, cfg)
        dets = decode_boxes(selected, regs, GRID)
        active = fc.coord_set()
        assert len(dets) <= cfg.max_detections
        for det in dets:
            assert det.query_voxel in active
        for g, kernel in enumerate(cfg.maxpool_kernel):
            radius = kernel // 2
            group = [d for d in dets if cfg.group_of_class[d.class_id] == g]
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    cheb = max(abs(group[i].query_voxel[0] - group[j].query_voxel[0]),
                               abs(group[i].query_voxel[1] - group[j].query_voxel[1]))
                    assert cheb > radius
