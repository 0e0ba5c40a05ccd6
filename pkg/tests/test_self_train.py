import json

import numpy as np
import pytest

from rebeam.errors import DegenerateDenominator, LengthMismatch
from rebeam.object_graph import (
    BoxPrediction,
    ConsistencyConfig,
    GraphConfig,
    MatchConfig,
    build_graph,
    consistency_loss,
    features_of,
    greedy_iou_match,
    matched_graph,
)
from rebeam.rbrs import DownsampleConfig, RbrsConfig, apply_rbrs
from rebeam.scene_synth import benchmark_dataset
from rebeam.self_train import (
    DtsConfig,
    EmaConfig,
    PseudoLabelConfig,
    ToyDetector,
    dts_step,
    dts_train,
    closed_gap,
    ema_update,
    evaluate_mse,
    filter_pseudo_labels,
    pretrain,
    total_loss,
)

from conftest import relative_error


def pred(conf, center=(0.0, 0.0, 0.0)):
    return BoxPrediction(center=np.asarray(center, float), size=np.ones(3), yaw=0.0,
                         confidence=conf)


class TestPseudoLabels:
    def test_strict_threshold(self):
        preds = [pred(c) for c in (0.3, 0.6, 0.9)]
        kept = filter_pseudo_labels(preds, PseudoLabelConfig(c_th=0.5))
        assert [p.confidence for p in kept] == [0.6, 0.9]

    def test_threshold_one_empty(self):
        preds = [pred(c) for c in (0.3, 0.6, 1.0)]
        assert filter_pseudo_labels(preds, PseudoLabelConfig(c_th=1.0)) == []

    def test_count_non_increasing_in_threshold(self):
        rng = np.random.default_rng(0)
        preds = [pred(float(c)) for c in rng.random(200)]
        counts = [
            len(filter_pseudo_labels(preds, PseudoLabelConfig(c_th=th)))
            for th in np.arange(0.1, 0.85, 0.1)
        ]
        assert counts == sorted(counts, reverse=True)
        kept = filter_pseudo_labels(preds, PseudoLabelConfig(c_th=0.4))
        assert all(p in preds for p in kept)


class TestEma:
    def test_paper_alpha_single_step(self):
        out = ema_update(np.array([1.0]), np.array([0.0]), EmaConfig(alpha=0.999))
        assert out[0] == pytest.approx(0.999)

    def test_endpoints_exact(self):
        t = np.array([1.2345, -2.0])
        s = np.array([0.5, 7.25])
        np.testing.assert_array_equal(ema_update(t, s, EmaConfig(alpha=1.0)), t)
        np.testing.assert_array_equal(ema_update(t, s, EmaConfig(alpha=0.0)), s)

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=500)
        s = rng.normal(size=500)
        out = ema_update(t, s, EmaConfig(alpha=0.999))
        assert np.all(out <= np.maximum(t, s)) and np.all(out >= np.minimum(t, s))

    def test_iterated_matches_closed_form(self):
        rng = np.random.default_rng(2)
        t0 = rng.uniform(0.5, 2.0, 200)
        s = rng.uniform(0.5, 2.0, 200)
        cfg = EmaConfig(alpha=0.999)
        t = t0.copy()
        for _ in range(200):
            t = ema_update(t, s, cfg)
        closed = 0.999**200 * t0 + (1 - 0.999**200) * s
        assert np.max(np.abs(t - closed) / np.abs(closed)) < 1e-13

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            ema_update(np.zeros(3), np.zeros(4), EmaConfig())


class TestTotalLossAndClosedGap:
    def test_total_loss(self):
        assert total_loss(0.0, 0.0) == 0.0
        assert total_loss(1.5, 0.25) == 1.75

    def test_total_loss_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            total_loss(np.nan, 0.0)

    def test_closed_gap_reported_value(self):
        assert closed_gap(81.4, 51.8, 83.3) == pytest.approx(93.97, abs=0.05)

    def test_closed_gap_endpoints(self):
        assert closed_gap(83.3, 51.8, 83.3) == pytest.approx(100.0)
        assert closed_gap(51.8, 51.8, 83.3) == pytest.approx(0.0)

    def test_closed_gap_degenerate(self):
        with pytest.raises(DegenerateDenominator):
            closed_gap(50.0, 60.0, 60.0)


def corner_cloud(boxes, per_edge=10):
    """Points along all 12 box edges: symmetric, so the centroid is the center."""
    ticks = (np.arange(per_edge) + 0.5) / per_edge - 0.5
    pts = []
    for b in boxes:
        c, s = np.cos(b.yaw), np.sin(b.yaw)
        local = []
        for t in ticks:
            for u in (-0.5, 0.5):
                for v in (-0.5, 0.5):
                    local.append([t, u, v])  # edges along x
                    local.append([u, t, v])  # edges along y
                    local.append([u, v, t])  # edges along z
        local = np.array(local) * b.size
        world_x = b.center[0] + c * local[:, 0] - s * local[:, 1]
        world_y = b.center[1] + s * local[:, 0] + c * local[:, 1]
        world_z = b.center[2] + local[:, 2]
        pts.append(np.column_stack([world_x, world_y, world_z,
                                    np.full(len(local), 0.5)]))
    return np.vstack(pts)


class TestToyDetector:
    def make_scene(self):
        boxes = [
            BoxPrediction(center=np.array([10.0, 0.0, 0.2]), size=np.array([4.0, 2.0, 1.5]),
                          yaw=0.3),
            BoxPrediction(center=np.array([5.0, 8.0, -0.1]), size=np.array([4.0, 2.0, 1.5]),
                          yaw=-0.8),
        ]
        return corner_cloud(boxes), boxes

    def test_exact_on_noiseless_corners(self):
        cloud, boxes = self.make_scene()
        det = ToyDetector()
        theta = np.concatenate([np.zeros(3), boxes[0].size])
        preds = det.predict(cloud, theta)
        assert len(preds) == 2
        for p, b in zip(preds, boxes):
            np.testing.assert_allclose(p.center, b.center, atol=1e-12)
            np.testing.assert_allclose(p.size, b.size, atol=1e-12)
        loss, grad = det.det_loss_and_grad(cloud, theta, boxes)
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_size_shift_raises_loss_per_dimension(self):
        cloud, boxes = self.make_scene()
        det = ToyDetector()
        theta = np.concatenate([np.zeros(3), boxes[0].size + 0.3])
        loss, _ = det.det_loss_and_grad(cloud, theta, boxes)
        assert loss == pytest.approx(3 * 0.09, abs=1e-12)

    def test_confidence_model(self):
        cloud, _ = self.make_scene()
        det = ToyDetector()
        preds = det.predict(cloud, det.init_params())
        n = len(cloud) // 2  # two equal-size clusters
        for p in preds:
            assert p.confidence == pytest.approx(n / (n + 5.0))

    def test_det_loss_gradient_finite_differences(self):
        rng = np.random.default_rng(3)
        cloud, boxes = self.make_scene()
        det = ToyDetector()
        theta = np.concatenate([rng.normal(scale=0.1, size=3),
                                boxes[0].size + rng.normal(scale=0.2, size=3)])
        _, grad = det.det_loss_and_grad(cloud, theta, boxes)
        h = 1e-5
        fd = np.zeros_like(theta)
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd[i] = (det.det_loss_and_grad(cloud, tp, boxes)[0]
                     - det.det_loss_and_grad(cloud, tm, boxes)[0]) / (2 * h)
        assert relative_error(grad, fd) < 1e-6

    def test_zero_matches(self):
        det = ToyDetector()
        cloud, _ = self.make_scene()
        far = [BoxPrediction(center=np.array([500.0, 0.0, 0.0]), size=np.ones(3), yaw=0.0)]
        loss, grad = det.det_loss_and_grad(cloud, det.init_params(), far)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_background_extent_filter(self):
        rng = np.random.default_rng(4)
        wall = np.column_stack([
            np.full(300, 30.0) + rng.normal(scale=0.05, size=300),
            np.linspace(-15, 15, 300),
            rng.uniform(-1, 1, 300),
            np.full(300, 0.5),
        ])
        det = ToyDetector()
        assert det.predict(wall, det.init_params()) == []


def total_step_loss(cloud, student_cloud, teacher_preds, theta, det, cfg):
    """Independent recomposition of the dts_step objective for FD checks."""
    preds = det.predict(student_cloud, theta)
    pseudo = filter_pseudo_labels(teacher_preds, cfg.pseudo)
    l_det = det.det_loss_and_grad(student_cloud, theta, pseudo, preds=preds)[0] if pseudo else 0.0
    graph_t = build_graph(teacher_preds, cfg.graph)
    graph_s = build_graph(preds, cfg.graph)
    pairs = greedy_iou_match(graph_t.nodes, graph_s.nodes, cfg.match.iou_th)
    mt = [graph_t.nodes[a] for a, _ in pairs]
    ms = [graph_s.nodes[b] for _, b in pairs]
    ft = features_of(mt) if mt else np.zeros((0, det.FEATURE_DIM))
    fs = features_of(ms) if ms else np.zeros((0, det.FEATURE_DIM))
    cons = consistency_loss(matched_graph(ms, cfg.graph), matched_graph(mt, cfg.graph),
                            fs, ft, cfg.cons, cfg.graph)
    return total_loss(l_det, cons.loss)


@pytest.fixture(scope="module")
def small_target():
    return benchmark_dataset(4, "target", seed=3)


class TestDtsStepAndTrain:

    def make_cfg(self, **kw):
        base = dict(
            beams=32,
            rbrs=RbrsConfig(mode="downsample", down=DownsampleConfig(gamma1=38.0)),
            pseudo=PseudoLabelConfig(),
            ema=EmaConfig(),
            graph=GraphConfig(),
            match=MatchConfig(),
            cons=ConsistencyConfig(beta1=0.5, beta2=0.5, gamma=0.5),
            learning_rate=0.01,
        )
        base.update(kw)
        return DtsConfig(**base)

    def test_frozen_system_identity(self, small_target):
        cloud, _ = small_target[0]
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        theta = det.init_params(init_size=3.0)
        cfg = self.make_cfg(ema=EmaConfig(alpha=1.0), learning_rate=0.0)
        step = dts_step(cloud, theta.copy(), theta.copy(), det, cfg, seed=5)
        np.testing.assert_array_equal(step.theta_student, theta)
        np.testing.assert_array_equal(step.theta_teacher, theta)

    def test_pseudo_labels_are_teacher_high_confidence(self, small_target):
        cloud, _ = small_target[0]
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        theta = np.concatenate([np.zeros(3), [2.6, 1.2, 1.0], [4.4, 2.1, 1.9],
                                [6.0, 2.5, 2.4]])
        teacher_preds = det.predict(cloud, theta)
        expected = [p for p in teacher_preds if p.confidence > 0.5]
        step = dts_step(cloud, theta, theta, det, self.make_cfg(), seed=5)
        assert step.pseudo_labels == len(expected)

    def test_gradient_matches_finite_differences(self, small_target):
        cloud, _ = small_target[1]
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        rng = np.random.default_rng(7)
        theta_t = np.concatenate([rng.normal(scale=0.05, size=3),
                                  [2.6, 1.2, 1.0], [4.5, 2.2, 1.9], [6.1, 2.6, 2.4]])
        theta_s = theta_t + rng.normal(scale=0.02, size=len(theta_t))
        cfg = self.make_cfg()
        step = dts_step(cloud, theta_s, theta_t, det, cfg, seed=9)
        grad = (theta_s - step.theta_student) / cfg.learning_rate

        teacher_preds = det.predict(cloud, theta_t)
        from dataclasses import replace
        student_cloud = apply_rbrs(cloud, 32, replace(cfg.rbrs, seed=9))
        h = 1e-5
        fd = np.zeros_like(theta_s)
        for i in range(len(theta_s)):
            tp, tm = theta_s.copy(), theta_s.copy()
            tp[i] += h
            tm[i] -= h
            fd[i] = (total_step_loss(cloud, student_cloud, teacher_preds, tp, det, cfg)
                     - total_step_loss(cloud, student_cloud, teacher_preds, tm, det, cfg)) / (2 * h)
        assert relative_error(grad, fd) < 1e-4

    def test_pretrain_zero_epochs_returns_init(self, small_target):
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        theta = pretrain(small_target, det, RbrsConfig(mode="passthrough"), beams=32,
                         epochs=0, learning_rate=0.01, seed=0)
        np.testing.assert_array_equal(theta, det.init_params())

    def test_pretrain_reduces_loss(self, small_target):
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        clouds = [c for c, _ in small_target]
        labels = [l for _, l in small_target]
        theta0 = det.init_params()
        theta = pretrain(small_target, det, RbrsConfig(mode="passthrough"), beams=32,
                         epochs=8, learning_rate=0.01, seed=0)
        assert evaluate_mse(clouds, labels, det, theta) < evaluate_mse(clouds, labels, det, theta0)

    def test_dts_train_zero_epochs(self, small_target):
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        clouds = [c for c, _ in small_target]
        theta = det.init_params(init_size=4.0)
        final, report = dts_train(clouds, theta, det, self.make_cfg(), epochs=0, seed=0)
        np.testing.assert_array_equal(final, theta)
        assert report.epochs == ()

    def test_dts_train_bitwise_reproducible(self, small_target, tmp_path):
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        clouds = [c for c, _ in small_target]
        labels = [l for _, l in small_target]
        theta = pretrain(small_target, det, RbrsConfig(mode="passthrough"), beams=32,
                         epochs=2, learning_rate=0.01, seed=0)
        runs = []
        for _ in range(2):
            final, report = dts_train(clouds, theta, det, self.make_cfg(), epochs=3,
                                      seed=0, eval_labels=labels)
            report.write_json(tmp_path / "report.json")
            runs.append(((tmp_path / "report.json").read_bytes(), final.tobytes()))
        assert runs[0] == runs[1]

    def test_report_files(self, small_target, tmp_path):
        det = ToyDetector(class_anchors=(2.6, 4.6, 6.2))
        clouds = [c for c, _ in small_target]
        labels = [l for _, l in small_target]
        theta = det.init_params(init_size=4.0)
        _, report = dts_train(clouds, theta, det, self.make_cfg(), epochs=2, seed=0,
                              eval_labels=labels)
        report.write_json(tmp_path / "report.json")
        report.write_csv(tmp_path / "curves.csv")
        doc = json.loads((tmp_path / "report.json").read_text())
        assert len(doc["epochs"]) == 2
        assert {"det_loss", "node_loss", "edge_loss", "cons_loss", "loss",
                "matched_pairs", "pseudo_labels", "target_mse"} <= set(doc["epochs"][0])
        lines = (tmp_path / "curves.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 epochs
