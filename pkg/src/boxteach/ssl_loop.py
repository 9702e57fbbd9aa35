"""Two-stage training: supervised pre-training, then EMA teacher-student
semi-supervised training with asymmetric augmentation and pseudo-labels.

The student sees strongly augmented scenes; the teacher sees only
sub-sampled ones and its surviving detections, carried through the student's
transform, supervise nearby student predictions. The unsupervised loss
deliberately omits the objectness term (and has no anchor-position
analogue): pseudo-labels are incomplete, so absence of a pseudo box is not
evidence of background.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("boxteach.ssl")

from .detector import (DetectorConfig, HeadGrads, detector_backward,
                       forward_full, init_detector_params)
from .eval import coverage, map_at, mean_pseudo_true_iou
from .geometry import Transform3D, iou3d, point_box_distance, transform_points
from .grid_pool import pool
from .iou_head import (IoUHeadConfig, JitterConfig, head_backward,
                       head_forward_cached, iou_optimize, jitter_box,
                       select_class_iou)
from .params import Adam, ParamVector
from .pseudo_label import (DEFAULT_SUPPRESSION_IOU, ThresholdConfig,
                           associate_for_supervision, filter_detections,
                           finalize_pseudo_labels, suppress)
from .synth_data import SceneSample

# Anchor-to-box distance bands for objectness supervision: positives inside
# the association radius, negatives beyond the far radius, in between ignored.
POSITIVE_RADIUS = 0.3
NEGATIVE_RADIUS = 0.6


@dataclass
class AugmentConfig:
    """Weak augmentation is sub-sampling only; strong augmentation adds a
    random flip, a yaw rotation, and a uniform scale."""

    n_points: int = 256
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.0
    rot_range: float = math.pi / 6
    scale_range: tuple = (0.9, 1.1)


@dataclass
class PretrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    batch_size: int = 4
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.3
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)


@dataclass
class SSLConfig:
    """Semi-supervised stage settings. The defaults carry the reference
    constants: unsupervised weight 2, batches of 4 labeled + 8 unlabeled,
    thresholds (0.9, 0.9, 0.25), keep-half suppression at IoU 0.25."""

    lambda_u: float = 2.0
    n_labeled: int = 4
    n_unlabeled: int = 8
    ema_decay: float = 0.999
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    suppression_mode: str = "iou-lhs"
    suppression_iou: float = DEFAULT_SUPPRESSION_IOU
    association_radius: float = POSITIVE_RADIUS
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    epochs: int = 40
    lr: float = 1e-3
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.3
    eval_interval: int = 10
    eval_unlabeled_scenes: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.lambda_u < 0.0:
            raise ValueError("lambda_u must be non-negative")


METRIC_COLUMNS = ("epoch", "map_0.25", "map_0.5", "coverage_0.25",
                  "coverage_0.5", "pseudo_count", "mean_pseudo_true_iou")


def augment(scene: SceneSample, strength: str, rng, cfg: AugmentConfig):
    """Sub-sample the scene and, for strong augmentation, apply a random
    flip/rotation/scale to points and labels. Returns (scene', transform)."""
    if strength not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation strength {strength!r}")
    n = len(scene.points)
    if cfg.n_points < n:
        keep = np.sort(rng.choice(n, size=cfg.n_points, replace=False))
        points = scene.points[keep]
        feats = scene.features[keep]
    else:
        points = scene.points.copy()
        feats = scene.features.copy()
    t = Transform3D()
    if strength == "strong":
        t = Transform3D(
            flip_x=bool(rng.random() < cfg.flip_x_prob),
            flip_y=bool(rng.random() < cfg.flip_y_prob),
            rot_yaw=float(rng.uniform(-cfg.rot_range, cfg.rot_range)),
            scale=float(rng.uniform(*cfg.scale_range)),
        )
        points = transform_points(points, t)
    labels = scene.labels
    if labels is not None and strength == "strong":
        from .geometry import apply_transform
        labels = [(apply_transform(b, t), c) for b, c in labels]
    return SceneSample(scene.scene_id, points, feats, labels=labels), t


def smooth_l1(x: np.ndarray):
    """Huber-style loss per element; returns (values, derivative)."""
    ax = np.abs(x)
    small = ax < 1.0
    vals = np.where(small, 0.5 * x * x, ax - 0.5)
    grad = np.clip(x, -1.0, 1.0)
    return vals, grad


def _bce_with_logits(z: np.ndarray, y: np.ndarray):
    vals = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = 1.0 / (1.0 + np.exp(-z)) - y
    return vals, grad


def assign_anchors(dets, labels):
    """Distance-band assignment: (positive indices, their matched label
    index, negative indices)."""
    pos, pos_gt, neg = [], [], []
    for i, det in enumerate(dets):
        dists = [point_box_distance(det.anchor, b) for b, _ in labels]
        dmin = min(dists) if dists else math.inf
        if dmin <= POSITIVE_RADIUS:
            pos.append(i)
            pos_gt.append(int(np.argmin(dists)))
        elif dmin > NEGATIVE_RADIUS:
            neg.append(i)
    return pos, pos_gt, neg


UNIT_LOSS_WEIGHTS = {"center": 1.0, "size": 1.0, "heading": 1.0,
                     "class": 1.0, "objectness": 1.0}


def supervised_loss(dets, labels, cfg: DetectorConfig, weights: dict | None = None):
    """Box, heading, class, and objectness terms against ground truth.

    Returns (value, HeadGrads, breakdown dict). Positive anchors regress
    their matched box; objectness trains positives against negatives with
    the middle band ignored. Term weights default to 1.
    """
    if not labels:
        raise ValueError("supervised loss needs a non-empty label set")
    w = dict(UNIT_LOSS_WEIGHTS)
    if weights:
        w.update(weights)
    k = len(dets)
    hg = HeadGrads.zeros(k, cfg.n_classes)
    pos, pos_gt, neg = assign_anchors(dets, labels)
    parts = {"center": 0.0, "size": 0.0, "heading": 0.0, "class": 0.0,
             "objectness": 0.0}

    if pos:
        inv = 1.0 / len(pos)
        for i, gi in zip(pos, pos_gt):
            gbox, gcls = labels[gi]
            det = dets[i]
            cv, cg = smooth_l1(det.box.center - gbox.center)
            parts["center"] += w["center"] * cv.sum() * inv
            hg.d_center[i] += w["center"] * cg * inv
            sv, sg = smooth_l1(det.box.size - gbox.size)
            parts["size"] += w["size"] * sv.sum() * inv
            hg.d_size[i] += w["size"] * sg * inv
            target = np.array([math.cos(gbox.yaw), math.sin(gbox.yaw)])
            pred = np.array([math.cos(det.box.yaw), math.sin(det.box.yaw)])
            parts["heading"] += w["heading"] * float(((pred - target) ** 2).sum()) * inv
            hg.d_heading[i] += w["heading"] * 2.0 * (pred - target) * inv
            probs = det.class_probs
            parts["class"] += -w["class"] * math.log(max(probs[gcls], 1e-300)) * inv
            onehot = np.zeros(cfg.n_classes)
            onehot[gcls] = 1.0
            hg.d_cls_logits[i] += w["class"] * (probs - onehot) * inv

    obj_ids = pos + neg
    if obj_ids:
        y = np.array([1.0] * len(pos) + [0.0] * len(neg))
        z = np.array([dets[i].objectness for i in obj_ids])
        logits = np.array([_logit(v) for v in z])
        vals, grad = _bce_with_logits(logits, y)
        parts["objectness"] = w["objectness"] * float(vals.mean())
        for j, i in enumerate(obj_ids):
            hg.d_obj_logit[i] += w["objectness"] * grad[j] / len(obj_ids)

    total = float(sum(parts.values()))
    return total, hg, parts


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return math.log(p / (1.0 - p))


def unsupervised_loss(dets, pseudo, association, cfg: DetectorConfig):
    """Pseudo-label terms for associated detections only: center, size,
    heading, class. No objectness and no anchor-position term, ever.

    Returns (value, HeadGrads, n_associated).
    """
    k = len(dets)
    hg = HeadGrads.zeros(k, cfg.n_classes)
    matched = [(i, m) for i, (ok, m) in enumerate(association) if ok]
    if not matched:
        return 0.0, hg, 0
    inv = 1.0 / len(matched)
    total = 0.0
    for i, m in matched:
        det = dets[i]
        pl = pseudo[m]
        cv, cg = smooth_l1(det.box.center - pl.box.center)
        total += cv.sum() * inv
        hg.d_center[i] += cg * inv
        sv, sg = smooth_l1(det.box.size - pl.box.size)
        total += sv.sum() * inv
        hg.d_size[i] += sg * inv
        target = np.array([math.cos(pl.box.yaw), math.sin(pl.box.yaw)])
        pred = np.array([math.cos(det.box.yaw), math.sin(det.box.yaw)])
        total += float(((pred - target) ** 2).sum()) * inv
        hg.d_heading[i] += 2.0 * (pred - target) * inv
        probs = det.class_probs
        total += -math.log(max(probs[pl.class_id], 1e-300)) * inv
        onehot = np.zeros(cfg.n_classes)
        onehot[pl.class_id] = 1.0
        hg.d_cls_logits[i] += (probs - onehot) * inv
    return float(total), hg, len(matched)


def build_iou_proposals(scene, labels, jitter_cfg: JitterConfig, rng,
                        dets=None, cache=None):
    """IoU-branch training data: ground-truth boxes, their jitters, and
    (optionally) the current detections' boxes taken as data.

    Returns a list of (pooled, class_id, target). Boxes are inputs here, not
    functions of the parameters; the branch loss therefore only moves the
    IoU head and the training objective stays an honest function.
    """
    if not labels:
        return []
    gt_boxes = [b for b, _ in labels]
    samples = []
    for gt, cls in labels:
        proposals = [gt] + [jitter_box(gt, jitter_cfg, rng)
                            for _ in range(jitter_cfg.n_jitters_per_box)]
        for prop in proposals:
            target = max(iou3d(prop, g) for g in gt_boxes)
            samples.append((prop, cls, target, None))
    if dets is not None:
        for i, det in enumerate(dets):
            overlaps = [iou3d(det.box, g) for g in gt_boxes]
            best = int(np.argmax(overlaps))
            pooled = cache.iou_pools[i] if cache is not None else None
            samples.append((det.box, labels[best][1], float(overlaps[best]), pooled))
    return samples


def iou_branch_loss(samples, scene, params: ParamVector, iou_cfg: IoUHeadConfig):
    """Mean L1 between estimated and exact IoU over fixed proposals.

    Returns (value, gradients over the full layout with only IoU blocks
    non-zero).
    """
    grads = params.zeros_like()
    if not samples:
        return 0.0, grads
    total = 0.0
    inv = 1.0 / len(samples)
    for box, cls, target, pooled in samples:
        if pooled is None:
            pooled = pool(box, scene.points, scene.features,
                          depth=iou_cfg.grid_depth, k=iou_cfg.knn)
        out, hcache = head_forward_cached(pooled, params, iou_cfg)
        v = select_class_iou(out, cls)
        total += abs(v - target) * inv
        d_out = np.zeros_like(out)
        d_out[cls] = float(np.sign(v - target)) * inv
        g, _ = head_backward(hcache, params, d_out)
        grads.add_(g)
    return float(total), grads


def ema_update(teacher: ParamVector, student: ParamVector, alpha: float) -> ParamVector:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not teacher.same_layout(student):
        raise ValueError("teacher and student parameter layouts differ")
    for name in teacher.blocks:
        t = teacher.blocks[name]
        t *= alpha
        t += (1.0 - alpha) * student.blocks[name]
    return teacher


def _scene_gradients(scene, params, det_cfg, jitter_cfg, rng):
    """Supervised forward/backward for one labeled scene."""
    dets, cache = forward_full(scene, params, det_cfg)
    value, hg, _ = supervised_loss(dets, scene.labels, det_cfg)
    grads = detector_backward(cache, hg, params, det_cfg)
    samples = build_iou_proposals(scene, scene.labels, jitter_cfg, rng,
                                  dets=dets, cache=cache)
    iou_val, iou_grads = iou_branch_loss(samples, scene, params, det_cfg.iou)
    grads.add_(iou_grads)
    return value + iou_val, grads


def _lr_at(base_lr, epoch, decay_epochs, factor):
    lr = base_lr
    for e in decay_epochs:
        if epoch >= e:
            lr *= factor
    return lr


def pretrain(labeled, det_cfg: DetectorConfig, cfg: PretrainConfig):
    """Supervised stage over the labeled scenes; returns (params, history)."""
    if not labeled:
        raise ValueError("pretraining needs at least one labeled scene")
    params = init_detector_params(det_cfg, np.random.default_rng([cfg.seed, 1]))
    opt = Adam(lr=cfg.lr)
    data_rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])
    jit_rng = np.random.default_rng([cfg.seed, 4])
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg.lr, epoch, cfg.lr_decay_epochs, cfg.lr_decay_factor)
        order = data_rng.permutation(len(labeled))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            grad_acc = params.zeros_like()
            batch_loss = 0.0
            for si in chunk:
                scene, _ = augment(labeled[si], "strong", aug_rng, cfg.augment)
                value, grads = _scene_gradients(scene, params, det_cfg,
                                                cfg.jitter, jit_rng)
                batch_loss += value / len(chunk)
                grad_acc.add_(grads, scale=1.0 / len(chunk))
            opt.step(params, grad_acc)
            losses.append(batch_loss)
        history.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d loss %.4f", epoch, history[-1])
    return params, history


def predict_scene(scene, params: ParamVector, det_cfg: DetectorConfig,
                  nms_mode: str = "iou-nms",
                  nms_iou: float = DEFAULT_SUPPRESSION_IOU,
                  thresholds: ThresholdConfig | None = None,
                  optimize: bool = False, opt_step: float | None = None,
                  opt_iters: int | None = None):
    """Test-time pipeline: forward, optional confidence filtering, optional
    IoU-ascent refinement, then suppression."""
    from .iou_head import DEFAULT_OPT_STEP, DEFAULT_OPT_STEPS
    from .pseudo_label import Detection

    dets = forward_full(scene, params, det_cfg)[0]
    if thresholds is not None:
        dets = filter_detections(dets, thresholds)
    if optimize and dets:
        refined = []
        for det in dets:
            box, trace = iou_optimize(
                det.box, scene.points, scene.features, params, det.class_id,
                det_cfg.iou, step=DEFAULT_OPT_STEP if opt_step is None else opt_step,
                steps=DEFAULT_OPT_STEPS if opt_iters is None else opt_iters)
            refined.append(Detection(box=box, objectness=det.objectness,
                                     class_probs=det.class_probs,
                                     pred_iou=float(trace[-1]), anchor=det.anchor))
        dets = refined
    return suppress(dets, nms_mode, nms_iou) if dets else []


def teacher_pseudo_labels(scene, teacher: ParamVector, det_cfg: DetectorConfig,
                          cfg: SSLConfig, transform: Transform3D):
    """Filter + suppress teacher detections and carry them into the frame of
    `transform`. Returns (pseudo labels, raw teacher detections)."""
    dets = forward_full(scene, teacher, det_cfg)[0]
    kept = suppress(filter_detections(dets, cfg.thresholds),
                    cfg.suppression_mode, cfg.suppression_iou)
    return finalize_pseudo_labels(kept, transform), dets


@dataclass
class SSLResult:
    student: ParamVector
    teacher: ParamVector
    metrics: list


def _eval_metrics(epoch, student, teacher, det_cfg, cfg, val_scenes,
                  unlabeled_subset, hidden_gts):
    preds = {s.scene_id: predict_scene(s, student, det_cfg) for s in val_scenes}
    gts = {s.scene_id: s.labels for s in val_scenes}
    reports = map_at(preds, gts, [0.25, 0.5])
    pseudo_by_scene = {}
    for s in unlabeled_subset:
        pls, _ = teacher_pseudo_labels(s, teacher, det_cfg, cfg, Transform3D())
        pseudo_by_scene[s.scene_id] = pls
    return {
        "epoch": epoch,
        "map_0.25": reports[0].map,
        "map_0.5": reports[1].map,
        "coverage_0.25": coverage(pseudo_by_scene, hidden_gts, 0.25),
        "coverage_0.5": coverage(pseudo_by_scene, hidden_gts, 0.5),
        "pseudo_count": sum(len(v) for v in pseudo_by_scene.values()),
        "mean_pseudo_true_iou": mean_pseudo_true_iou(pseudo_by_scene, hidden_gts),
    }


def ssl_train(split, pretrained: ParamVector, det_cfg: DetectorConfig,
              cfg: SSLConfig) -> SSLResult:
    """EMA teacher-student stage. Returns final student, teacher, and one
    metrics row per evaluation interval (epoch 0 is the pre-training state)."""
    student = pretrained.copy()
    teacher = pretrained.copy()
    opt = Adam(lr=cfg.lr)
    batch_rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    jit_rng = np.random.default_rng([cfg.seed, 13])

    labeled = split.labeled
    unlabeled = split.unlabeled
    if not labeled:
        raise ValueError("semi-supervised training needs labeled scenes")
    subset = unlabeled[:cfg.eval_unlabeled_scenes]
    hidden_gts = {s.scene_id: split.hidden_gt(s.scene_id) for s in subset}

    metrics = [_eval_metrics(0, student, teacher, det_cfg, cfg, split.val,
                             subset, hidden_gts)]

    steps_per_epoch = max(1, len(labeled) // cfg.n_labeled)
    unl_cycle: list[int] = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = _lr_at(cfg.lr, epoch - 1, cfg.lr_decay_epochs, cfg.lr_decay_factor)
        lab_order = list(batch_rng.permutation(len(labeled)))
        for step in range(steps_per_epoch):
            lab_ids = lab_order[step * cfg.n_labeled:(step + 1) * cfg.n_labeled]
            unl_ids = []
            while unlabeled and len(unl_ids) < cfg.n_unlabeled:
                if not unl_cycle:
                    unl_cycle = list(batch_rng.permutation(len(unlabeled)))
                unl_ids.append(unl_cycle.pop())
            grad_acc = student.zeros_like()

            for si in lab_ids:
                scene, _ = augment(labeled[si], "strong", aug_rng, cfg.augment)
                _, grads = _scene_gradients(scene, student, det_cfg,
                                            cfg.jitter, jit_rng)
                grad_acc.add_(grads, scale=1.0 / max(1, len(lab_ids)))

            # The unsupervised path always runs so a zero lambda_u only
            # removes its weight, not its rng draws or bookkeeping.
            for si in unl_ids:
                raw = unlabeled[si]
                weak_scene, _ = augment(raw, "weak", aug_rng, cfg.augment)
                strong_scene, t_student = augment(raw, "strong", aug_rng,
                                                  cfg.augment)
                pseudo, _ = teacher_pseudo_labels(weak_scene, teacher,
                                                  det_cfg, cfg, t_student)
                s_dets, s_cache = forward_full(strong_scene, student, det_cfg)
                assoc = associate_for_supervision(s_dets, pseudo,
                                                  cfg.association_radius)
                _, hg, n_assoc = unsupervised_loss(s_dets, pseudo, assoc,
                                                   det_cfg)
                if n_assoc and cfg.lambda_u != 0.0:
                    grads = detector_backward(s_cache, hg, student, det_cfg)
                    grad_acc.add_(grads,
                                  scale=cfg.lambda_u / max(1, len(unl_ids)))

            opt.step(student, grad_acc)
            ema_update(teacher, student, cfg.ema_decay)

        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs:
            metrics.append(_eval_metrics(epoch, student, teacher, det_cfg, cfg,
                                         split.val, subset, hidden_gts))
            log.info("ssl epoch %d: mAP@0.25 %.3f coverage@0.25 %.3f "
                     "pseudo %d", epoch, metrics[-1]["map_0.25"],
                     metrics[-1]["coverage_0.25"], metrics[-1]["pseudo_count"])
    return SSLResult(student=student, teacher=teacher, metrics=metrics)


# --- checkpoints and metrics files -------------------------------------------


def save_checkpoint(path: str, student: ParamVector, teacher: ParamVector | None,
                    optimizer: Adam | None, epoch: int) -> None:
    doc = {
        "epoch": epoch,
        "student": student.to_json_obj(),
        "teacher": None if teacher is None else teacher.to_json_obj(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path: str):
    with open(path) as fh:
        doc = json.load(fh)
    student = ParamVector.from_json_obj(doc["student"])
    teacher = (None if doc["teacher"] is None
               else ParamVector.from_json_obj(doc["teacher"]))
    optimizer = (None if doc["optimizer"] is None
                 else Adam.from_state_dict(doc["optimizer"]))
    return student, teacher, optimizer, doc["epoch"]


def write_metrics_csv(metrics, path: str) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for row in metrics:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in METRIC_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
