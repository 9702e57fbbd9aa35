"""Toy detector: forward contracts, FPS, and the full gradient check."""

import numpy as np
import pytest

from boxteach.detector import (
    DetectorConfig,
    detector_backward,
    detector_forward,
    farthest_point_sample,
    forward_full,
    init_detector_params,
)
from boxteach.iou_head import IoUHeadConfig, JitterConfig
from boxteach.ssl_loop import (
    build_iou_proposals,
    iou_branch_loss,
    supervised_loss,
    unsupervised_loss,
)
from boxteach.pseudo_label import PseudoLabel, associate_for_supervision
from boxteach.geometry import OrientedBox3D
from boxteach.synth_data import GeneratorConfig, generate_scene

SMALL_GEN = GeneratorConfig(n_objects_range=(2, 3), points_per_object=24,
                            background_points=48)
SMALL_CFG = DetectorConfig(n_proposals=8, n_neighbors=8, hidden=16,
                           iou=IoUHeadConfig(hidden=16, grid_depth=2))


def small_setup(seed=0):
    scene = generate_scene(seed, SMALL_GEN)
    params = init_detector_params(SMALL_CFG, np.random.default_rng(seed + 1000))
    return scene, params


class TestFPS:
    def test_deterministic_and_distinct(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (100, 3))
        a = farthest_point_sample(pts, 10)
        b = farthest_point_sample(pts, 10)
        np.testing.assert_array_equal(a, b)
        assert len(set(a.tolist())) == 10
        assert a[0] == 0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((3, 3)), 5)


class TestForward:
    def test_k_detections(self):
        scene, params = small_setup()
        dets = detector_forward(scene, params, SMALL_CFG)
        assert len(dets) == SMALL_CFG.n_proposals

    def test_sizes_positive(self):
        for seed in range(5):
            scene, params = small_setup(seed)
            for det in detector_forward(scene, params, SMALL_CFG):
                assert np.all(det.box.size > 0)

    def test_outputs_valid(self):
        scene, params = small_setup(2)
        for det in detector_forward(scene, params, SMALL_CFG):
            assert 0.0 <= det.objectness <= 1.0
            assert 0.0 < det.pred_iou < 1.0
            assert det.class_probs.sum() == pytest.approx(1.0, abs=1e-9)

    def test_deterministic(self):
        scene, params = small_setup(3)
        a = detector_forward(scene, params, SMALL_CFG)
        b = detector_forward(scene, params, SMALL_CFG)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.box.center, db.box.center)
            assert da.pred_iou == db.pred_iou

    def test_scene_too_small(self):
        scene, params = small_setup(4)
        tiny = type(scene)(scene.scene_id, scene.points[:4], scene.features[:4])
        with pytest.raises(ValueError, match="points"):
            detector_forward(tiny, params, SMALL_CFG)


class TestSupervisedLoss:
    def perfect_dets(self, scene):
        from boxteach.pseudo_label import Detection
        dets = []
        for box, cls in scene.labels:
            probs = np.zeros(SMALL_CFG.n_classes)
            probs[cls] = 1.0
            dets.append(Detection(box=OrientedBox3D(box.center, box.size, box.yaw),
                                  objectness=0.999, class_probs=probs,
                                  pred_iou=0.9, anchor=box.center))
        return dets

    def test_perfect_predictions_zero_box_terms(self):
        scene, _ = small_setup(5)
        dets = self.perfect_dets(scene)
        _, _, parts = supervised_loss(dets, scene.labels, SMALL_CFG)
        assert parts["center"] == 0.0
        assert parts["size"] == 0.0
        assert parts["heading"] == pytest.approx(0.0, abs=1e-18)
        assert parts["class"] == pytest.approx(0.0, abs=1e-12)

    def test_doubling_weight_doubles_term(self):
        scene, params = small_setup(6)
        dets = detector_forward(scene, params, SMALL_CFG)
        _, _, base = supervised_loss(dets, scene.labels, SMALL_CFG)
        _, _, heavy = supervised_loss(dets, scene.labels, SMALL_CFG,
                                      weights={"center": 2.0})
        assert heavy["center"] == pytest.approx(2.0 * base["center"], rel=1e-12)
        assert heavy["class"] == pytest.approx(base["class"], rel=1e-12)

    def test_empty_labels_rejected(self):
        scene, params = small_setup(7)
        dets = detector_forward(scene, params, SMALL_CFG)
        with pytest.raises(ValueError):
            supervised_loss(dets, [], SMALL_CFG)


class TestUnsupervisedLoss:
    def test_empty_pseudo_zero(self):
        scene, params = small_setup(8)
        dets = detector_forward(scene, params, SMALL_CFG)
        assoc = associate_for_supervision(dets, [])
        value, hg, n = unsupervised_loss(dets, [], assoc, SMALL_CFG)
        assert value == 0.0 and n == 0
        assert np.all(hg.d_center == 0.0) and np.all(hg.d_cls_logits == 0.0)

    def test_objectness_gradient_exactly_zero(self):
        scene, params = small_setup(9)
        dets, cache = forward_full(scene, params, SMALL_CFG)
        pseudo = [PseudoLabel(b, c, 0.9) for b, c in scene.labels]
        assoc = associate_for_supervision(dets, pseudo)
        _, hg, n = unsupervised_loss(dets, pseudo, assoc, SMALL_CFG)
        assert n > 0
        assert np.all(hg.d_obj_logit == 0.0)
        grads = detector_backward(cache, hg, params, SMALL_CFG)
        np.testing.assert_array_equal(grads["det.obj.w"], 0.0)
        np.testing.assert_array_equal(grads["det.obj.b"], 0.0)

    def test_exact_match_zero_loss(self):
        scene, _ = small_setup(10)
        from boxteach.pseudo_label import Detection
        box, cls = scene.labels[0]
        probs = np.zeros(SMALL_CFG.n_classes)
        probs[cls] = 1.0
        det = Detection(box=OrientedBox3D(box.center, box.size, box.yaw),
                        objectness=0.5, class_probs=probs, pred_iou=0.5,
                        anchor=box.center)
        pseudo = [PseudoLabel(OrientedBox3D(box.center, box.size, box.yaw), cls, 1.0)]
        assoc = associate_for_supervision([det], pseudo)
        value, _, n = unsupervised_loss([det], pseudo, assoc, SMALL_CFG)
        assert n == 1
        assert value == pytest.approx(0.0, abs=1e-12)


class TestFullGradientCheck:
    def test_total_loss_gradients_match_fd(self):
        # Composite objective: supervised + 2 * unsupervised (fixed pseudo
        # labels) + IoU branch (fixed proposals). Central differences over a
        # random selection of parameter entries across every block family.
        lambda_u = 2.0
        delta = 1e-6
        rng = np.random.default_rng(42)
        for trial in range(20):
            scene, params = small_setup(100 + trial)
            pseudo = [PseudoLabel(OrientedBox3D(
                b.center + rng.normal(0, 0.05, 3), b.size, b.yaw), c, 0.9)
                for b, c in scene.labels]
            samples = build_iou_proposals(scene, scene.labels,
                                          JitterConfig(n_jitters_per_box=1),
                                          np.random.default_rng(trial))

            def total(p):
                dets, _ = forward_full(scene, p, SMALL_CFG)
                sup, _, _ = supervised_loss(dets, scene.labels, SMALL_CFG)
                assoc = associate_for_supervision(dets, pseudo)
                uns, _, _ = unsupervised_loss(dets, pseudo, assoc, SMALL_CFG)
                iou_val, _ = iou_branch_loss(samples, scene, p, SMALL_CFG.iou)
                return sup + lambda_u * uns + iou_val

            dets, cache = forward_full(scene, params, SMALL_CFG)
            _, hg_sup, _ = supervised_loss(dets, scene.labels, SMALL_CFG)
            assoc = associate_for_supervision(dets, pseudo)
            _, hg_uns, _ = unsupervised_loss(dets, pseudo, assoc, SMALL_CFG)
            hg_sup.d_center += lambda_u * hg_uns.d_center
            hg_sup.d_size += lambda_u * hg_uns.d_size
            hg_sup.d_heading += lambda_u * hg_uns.d_heading
            hg_sup.d_obj_logit += lambda_u * hg_uns.d_obj_logit
            hg_sup.d_cls_logits += lambda_u * hg_uns.d_cls_logits
            grads = detector_backward(cache, hg_sup, params, SMALL_CFG)
            _, ig = iou_branch_loss(samples, scene, params, SMALL_CFG.iou)
            grads.add_(ig)

            names = rng.choice(params.names(), size=6, replace=False)
            for name in names:
                block = params[name]
                fi = int(rng.integers(block.size))
                plus = params.copy()
                minus = params.copy()
                plus[name].flat[fi] += delta
                minus[name].flat[fi] -= delta
                fd = (total(plus) - total(minus)) / (2 * delta)
                an = grads[name].flat[fi]
                assert an == pytest.approx(fd, rel=1e-3, abs=1e-7), \
                    f"trial {trial} block {name} entry {fi}"
