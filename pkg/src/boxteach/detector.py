"""Anchor-based toy detector over synthetic scenes, with manual backprop.

Anchors come from farthest-point sampling of the scene; each anchor pools
its nearest neighbors' features (mean, max, and mean relative position)
through a small trunk MLP. Prediction heads emit a center offset, a size via
softplus, a heading direction, an objectness logit, and class logits. The
estimated IoU of each predicted box is filled in by the IoU head over the
same scene points. Forward caches enough state for an exact reverse pass
over all detector parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox3D
from .grid_pool import pool
from .iou_head import IoUHeadConfig, head_forward, init_iou_head_params, sigmoid
from .params import ParamVector
from .pseudo_label import Detection

# Softplus sizes are floored here; the gradient is already ~1e-6 at the
# floor so the clamp is invisible to finite differences.
SIZE_FLOOR = 1e-6
HEADING_NORM_FLOOR = 1e-8

@dataclass
class DetectorConfig:
    feature_dim: int = 16
    n_classes: int = 3
    n_proposals: int = 24
    n_neighbors: int = 24
    hidden: int = 64
    iou: IoUHeadConfig = field(default_factory=IoUHeadConfig)

    def __post_init__(self):
        if self.iou.feature_dim != self.feature_dim or self.iou.n_classes != self.n_classes:
            raise ValueError("IoU head config must share feature_dim and n_classes")

    @property
    def input_dim(self) -> int:
        # mean/max/std feature pools, mean relative position, and the
        # rel-position x offset-feature cross-moment (see forward_full).
        return 3 * self.feature_dim + 12


def inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def init_detector_params(cfg: DetectorConfig, rng) -> ParamVector:
    """Detector and IoU head blocks in one vector (one model, one layout)."""
    h, l, d = cfg.hidden, cfg.n_classes, cfg.input_dim
    params = ParamVector()

    def dense(name, fan_in, fan_out):
        params[name + ".w"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))
        params[name + ".b"] = np.zeros(fan_out)

    params["det.trunk.w0"] = rng.normal(0.0, math.sqrt(2.0 / d), (d, h))
    params["det.trunk.b0"] = np.zeros(h)
    params["det.trunk.w1"] = rng.normal(0.0, math.sqrt(2.0 / h), (h, h))
    params["det.trunk.b1"] = np.zeros(h)
    dense("det.center", h, 3)
    dense("det.size", h, 3)
    params["det.size.b"] += inv_softplus(0.55)
    dense("det.heading", h, 2)
    params["det.heading.b"] += np.array([1.0, 0.0])
    dense("det.obj", h, 1)
    dense("det.cls", h, l)
    head = init_iou_head_params(cfg.iou, rng)
    for name in head.names():
        params[name] = head[name]
    return params


def farthest_point_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Deterministic farthest-point sampling starting from index 0."""
    n = len(points)
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    chosen = np.empty(k, dtype=int)
    chosen[0] = 0
    d2 = ((points - points[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class DetectorCache:
    """Everything the reverse pass and the losses need from one forward."""

    anchors: np.ndarray       # (K, 3)
    x: np.ndarray             # (K, 2F+3) pooled anchor inputs
    z0: np.ndarray            # trunk pre-activations
    z1: np.ndarray
    size_raw: np.ndarray      # (K, 3)
    size: np.ndarray          # (K, 3) post-softplus, floored
    heading_raw: np.ndarray   # (K, 2)
    heading_norm: np.ndarray  # (K,)
    heading_unit: np.ndarray  # (K, 2)
    obj_logit: np.ndarray     # (K,)
    cls_logits: np.ndarray    # (K, L)
    class_probs: np.ndarray   # (K, L)
    centers: np.ndarray       # (K, 3)
    iou_pools: list           # per-detection GridPoolResult, boxes as data


def forward_full(scene, params: ParamVector, cfg: DetectorConfig):
    """Run the detector; returns (detections, cache)."""
    pts = scene.points
    feats = scene.features
    if len(pts) < cfg.n_proposals:
        raise ValueError(
            f"scene {scene.scene_id} has {len(pts)} points, "
            f"needs >= {cfg.n_proposals}")
    idx = farthest_point_sample(pts, cfg.n_proposals)
    anchors = pts[idx]
    r = min(cfg.n_neighbors, len(pts))
    d2 = ((anchors[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    nb = np.argsort(d2, axis=1, kind="stable")[:, :r]
    nb_feats = feats[nb]
    nb_rel = pts[nb] - anchors[:, None, :]
    # Cross-moment of the neighborhood's world offsets against the first
    # three feature channels (the box-frame offsets the generator encodes):
    # for on-object patches this approximates the box rotation, which is
    # what lets the trunk place the center in the world frame.
    rel_c = nb_rel - nb_rel.mean(axis=1, keepdims=True)
    off_c = nb_feats[:, :, :3] - nb_feats[:, :, :3].mean(axis=1, keepdims=True)
    cross = np.einsum("krd,kre->kde", rel_c, off_c).reshape(len(anchors), 9) / r
    x = np.concatenate([nb_feats.mean(axis=1), nb_feats.max(axis=1),
                        nb_feats.std(axis=1), nb_rel.mean(axis=1), cross], axis=1)

    z0 = x @ params["det.trunk.w0"] + params["det.trunk.b0"]
    h0 = np.maximum(z0, 0.0)
    z1 = h0 @ params["det.trunk.w1"] + params["det.trunk.b1"]
    h1 = np.maximum(z1, 0.0)

    offsets = h1 @ params["det.center.w"] + params["det.center.b"]
    centers = anchors + offsets
    size_raw = h1 @ params["det.size.w"] + params["det.size.b"]
    size = np.maximum(np.logaddexp(0.0, size_raw), SIZE_FLOOR)
    heading_raw = h1 @ params["det.heading.w"] + params["det.heading.b"]
    norm = np.maximum(np.linalg.norm(heading_raw, axis=1), HEADING_NORM_FLOOR)
    unit = heading_raw / norm[:, None]
    obj_logit = (h1 @ params["det.obj.w"] + params["det.obj.b"]).ravel()
    objectness = sigmoid(obj_logit)
    cls_logits = h1 @ params["det.cls.w"] + params["det.cls.b"]
    probs = _softmax(cls_logits)

    dets = []
    pools = []
    for i in range(cfg.n_proposals):
        box = OrientedBox3D(centers[i], size[i],
                            math.atan2(unit[i, 1], unit[i, 0]))
        pooled = pool(box, pts, feats, depth=cfg.iou.grid_depth, k=cfg.iou.knn)
        pools.append(pooled)
        v = float(head_forward(pooled, params, cfg.iou)[int(np.argmax(probs[i]))])
        dets.append(Detection(box=box, objectness=float(objectness[i]),
                              class_probs=probs[i], pred_iou=v, anchor=anchors[i]))

    cache = DetectorCache(anchors=anchors, x=x, z0=z0, z1=z1, size_raw=size_raw,
                          size=size, heading_raw=heading_raw, heading_norm=norm,
                          heading_unit=unit, obj_logit=obj_logit,
                          cls_logits=cls_logits, class_probs=probs,
                          centers=centers, iou_pools=pools)
    return dets, cache


def detector_forward(scene, params: ParamVector, cfg: DetectorConfig):
    """Public forward: the list of detections only."""
    return forward_full(scene, params, cfg)[0]


@dataclass
class HeadGrads:
    """Loss gradients w.r.t. the detector head outputs.

    d_center and d_size are w.r.t. the final center/size values, d_heading
    w.r.t. the normalized direction, d_obj_logit and d_cls_logits w.r.t. the
    raw logits (the losses fold their activation derivatives in for
    numerical stability).
    """

    d_center: np.ndarray
    d_size: np.ndarray
    d_heading: np.ndarray
    d_obj_logit: np.ndarray
    d_cls_logits: np.ndarray

    @classmethod
    def zeros(cls, k: int, n_classes: int) -> "HeadGrads":
        return cls(np.zeros((k, 3)), np.zeros((k, 3)), np.zeros((k, 2)),
                   np.zeros(k), np.zeros((k, n_classes)))

    def add_(self, other: "HeadGrads") -> None:
        self.d_center += other.d_center
        self.d_size += other.d_size
        self.d_heading += other.d_heading
        self.d_obj_logit += other.d_obj_logit
        self.d_cls_logits += other.d_cls_logits


def detector_backward(cache: DetectorCache, hg: HeadGrads, params: ParamVector,
                      cfg: DetectorConfig) -> ParamVector:
    """Reverse pass; returns gradients in the full model layout (IoU head
    blocks stay zero, that branch backpropagates separately)."""
    grads = params.zeros_like()
    h0 = np.maximum(cache.z0, 0.0)
    h1 = np.maximum(cache.z1, 0.0)

    d_offsets = hg.d_center
    sp = np.logaddexp(0.0, cache.size_raw)
    d_size_raw = hg.d_size * sigmoid(cache.size_raw) * (sp > SIZE_FLOOR)
    # Normalization: d raw = (I - u u^T) / |raw| applied to the unit-vector
    # gradient; degenerate directions get no gradient.
    dot = np.einsum("kd,kd->k", cache.heading_unit, hg.d_heading)
    d_heading_raw = (hg.d_heading - cache.heading_unit * dot[:, None]) / cache.heading_norm[:, None]
    d_heading_raw[cache.heading_norm <= HEADING_NORM_FLOOR] = 0.0

    d_h1 = np.zeros_like(h1)
    for name, d_out in (("det.center", d_offsets), ("det.size", d_size_raw),
                        ("det.heading", d_heading_raw),
                        ("det.obj", hg.d_obj_logit[:, None]),
                        ("det.cls", hg.d_cls_logits)):
        grads[name + ".w"] = h1.T @ d_out
        grads[name + ".b"] = d_out.sum(axis=0)
        d_h1 += d_out @ params[name + ".w"].T

    d_z1 = d_h1 * (cache.z1 > 0.0)
    grads["det.trunk.w1"] = h0.T @ d_z1
    grads["det.trunk.b1"] = d_z1.sum(axis=0)
    d_h0 = d_z1 @ params["det.trunk.w1"].T
    d_z0 = d_h0 * (cache.z0 > 0.0)
    grads["det.trunk.w0"] = cache.x.T @ d_z0
    grads["det.trunk.b0"] = d_z0.sum(axis=0)
    return grads
