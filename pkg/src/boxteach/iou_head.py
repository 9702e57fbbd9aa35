"""Class-aware IoU estimation head over grid-pooled box features.

A small point network: each lattice point's [box-frame coordinates;
interpolated features] goes through a shared MLP, a channel-wise max pool
collapses the lattice, and a second MLP emits one sigmoid-bounded IoU
estimate per class. Training data comes from jittering ground-truth boxes;
the exact IoU against the best-overlapping ground-truth box is the L1
regression target. All gradients are hand-rolled reverse mode, which is
what lets test-time gradient ascent refine box parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox3D, iou3d
from .grid_pool import GridPoolResult, pool, pool_with_jacobian
from .params import Adam, ParamVector

DEFAULT_GRID_DEPTH = 4
DEFAULT_KNN = 3
DEFAULT_OPT_STEPS = 10
OPT_STEP_RANGE = (1e-4, 5e-4)
DEFAULT_OPT_STEP = 5e-4

# Jittered boxes never shrink below this fraction of the original size.
MIN_SIZE_FACTOR = 0.1


@dataclass
class IoUHeadConfig:
    feature_dim: int = 16
    hidden: int = 32
    n_classes: int = 3
    grid_depth: int = DEFAULT_GRID_DEPTH
    knn: int = DEFAULT_KNN

    @property
    def input_dim(self) -> int:
        return self.feature_dim + 3


@dataclass
class JitterConfig:
    sigma_factor: float = 0.3
    n_jitters_per_box: int = 3

    def __post_init__(self):
        if self.sigma_factor <= 0.0:
            raise ValueError("sigma_factor must be positive")


_POINT_LAYERS = ("iou.point.w0", "iou.point.b0", "iou.point.w1", "iou.point.b1",
                 "iou.point.w2", "iou.point.b2")
_POST_LAYERS = ("iou.post.w0", "iou.post.b0", "iou.post.w1", "iou.post.b1",
                "iou.post.w2", "iou.post.b2")


def init_iou_head_params(cfg: IoUHeadConfig, rng) -> ParamVector:
    """He-style initialization; output bias zero so an untrained head says 0.5."""
    h, l, d = cfg.hidden, cfg.n_classes, cfg.input_dim
    shapes = [(d, h), (h,), (h, h), (h,), (h, h), (h,),
              (h, h), (h,), (h, h), (h,), (h, l), (l,)]
    params = ParamVector()
    for name, shape in zip(_POINT_LAYERS + _POST_LAYERS, shapes):
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
    return params


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class HeadCache:
    """Forward activations needed by the backward pass."""

    x: np.ndarray          # (G, F+3) inputs
    point_pre: list        # pre-activation per point layer, (G, H)
    pooled: np.ndarray     # (H,)
    argmax: np.ndarray     # (H,) lattice index that won the max pool
    post_pre: list         # pre-activations of the post MLP
    out: np.ndarray        # (L,)


def head_forward_cached(pool_result: GridPoolResult, params: ParamVector,
                        cfg: IoUHeadConfig):
    x = np.concatenate([pool_result.local_coords, pool_result.features], axis=1)
    if x.shape[1] != cfg.input_dim:
        raise ValueError(
            f"pooled input dim {x.shape[1]} does not match head input {cfg.input_dim}")
    point_pre = []
    h = x
    for i in range(3):
        z = h @ params[f"iou.point.w{i}"] + params[f"iou.point.b{i}"]
        point_pre.append(z)
        h = np.maximum(z, 0.0)
    argmax = h.argmax(axis=0)
    pooled = h[argmax, np.arange(h.shape[1])]
    post_pre = []
    y = pooled
    for i in range(3):
        z = y @ params[f"iou.post.w{i}"] + params[f"iou.post.b{i}"]
        post_pre.append(z)
        y = np.maximum(z, 0.0) if i < 2 else z
    out = sigmoid(y)
    return out, HeadCache(x=x, point_pre=point_pre, pooled=pooled, argmax=argmax,
                          post_pre=post_pre, out=out)


def head_forward(pool_result: GridPoolResult, params: ParamVector,
                 cfg: IoUHeadConfig) -> np.ndarray:
    """Per-class IoU estimates in (0, 1), shape (n_classes,)."""
    return head_forward_cached(pool_result, params, cfg)[0]


def head_backward(cache: HeadCache, params: ParamVector, d_out: np.ndarray):
    """Reverse pass. Returns (gradients over head blocks, d input (G, F+3))."""
    grads = ParamVector()
    dz = d_out * cache.out * (1.0 - cache.out)
    for i in (2, 1, 0):
        inp = cache.pooled if i == 0 else np.maximum(cache.post_pre[i - 1], 0.0)
        grads[f"iou.post.w{i}"] = np.outer(inp, dz)
        grads[f"iou.post.b{i}"] = dz.copy()
        dz = dz @ params[f"iou.post.w{i}"].T
        if i > 0:
            dz = dz * (cache.post_pre[i - 1] > 0.0)
    # Max pool routes each channel's gradient to the winning lattice point.
    d_h = np.zeros((cache.x.shape[0], dz.shape[0]))
    d_h[cache.argmax, np.arange(dz.shape[0])] = dz
    for i in (2, 1, 0):
        d_h = d_h * (cache.point_pre[i] > 0.0)
        inp = cache.x if i == 0 else np.maximum(cache.point_pre[i - 1], 0.0)
        grads[f"iou.point.w{i}"] = inp.T @ d_h
        grads[f"iou.point.b{i}"] = d_h.sum(axis=0)
        d_h = d_h @ params[f"iou.point.w{i}"].T
    # Reorder blocks to the canonical layout for accumulation.
    ordered = ParamVector()
    for name in _POINT_LAYERS + _POST_LAYERS:
        ordered[name] = grads[name]
    return ordered, d_h


def select_class_iou(outputs: np.ndarray, class_id: int) -> float:
    if not 0 <= class_id < len(outputs):
        raise IndexError(f"class {class_id} out of range for {len(outputs)} outputs")
    return float(outputs[class_id])


def jitter_box(box: OrientedBox3D, cfg: JitterConfig, rng) -> OrientedBox3D:
    """Gaussian noise on center and size, per-axis std sigma_factor * size."""
    std = cfg.sigma_factor * box.size
    center = box.center + rng.normal(0.0, 1.0, 3) * std
    size = box.size + rng.normal(0.0, 1.0, 3) * std
    size = np.maximum(size, MIN_SIZE_FACTOR * box.size)
    return OrientedBox3D(center, size, box.yaw)


def box_iou_gradient(box: OrientedBox3D, seed_xyz, seed_feats,
                     params: ParamVector, class_id: int, cfg: IoUHeadConfig):
    """Estimated IoU for one class and its gradient w.r.t. box parameters.

    Returns (v, d v/d center (3,), d v/d size (3,), d v/d yaw). Chains the
    head's input gradient through the pooling Jacobians; the box-frame
    coordinate block feeds only the size derivative.
    """
    result, jac = pool_with_jacobian(box, seed_xyz, seed_feats,
                                     depth=cfg.grid_depth, k=cfg.knn)
    out, cache = head_forward_cached(result, params, cfg)
    d_out = np.zeros_like(out)
    d_out[class_id] = 1.0
    _, d_input = head_backward(cache, params, d_out)
    d_local = d_input[:, :3]
    d_feat = d_input[:, 3:]
    grad_center = np.einsum("gf,gfd->d", d_feat, jac.feat_center)
    grad_size = (np.einsum("gf,gfd->d", d_feat, jac.feat_size)
                 + np.einsum("gd,gd->d", d_local, jac.local_size))
    grad_yaw = float(np.einsum("gf,gf->", d_feat, jac.feat_yaw))
    return select_class_iou(out, class_id), grad_center, grad_size, grad_yaw


def iou_optimize(box: OrientedBox3D, seed_xyz, seed_feats, params: ParamVector,
                 class_id: int, cfg: IoUHeadConfig | None = None,
                 step: float = DEFAULT_OPT_STEP, steps: int = DEFAULT_OPT_STEPS):
    """Gradient ascent on the estimated IoU over box center and size.

    Yaw is left untouched. Returns the refined box and the estimate trace
    (length steps + 1, starting value first).
    """
    cfg = cfg or IoUHeadConfig()
    current = OrientedBox3D(box.center.copy(), box.size.copy(), box.yaw)
    trace = []
    for _ in range(steps):
        v, g_center, g_size, _ = box_iou_gradient(
            current, seed_xyz, seed_feats, params, class_id, cfg)
        trace.append(v)
        center = current.center + step * g_center
        size = np.maximum(current.size + step * g_size, 1e-3)
        current = OrientedBox3D(center, size, current.yaw)
    final_pool = pool(current, seed_xyz, seed_feats, depth=cfg.grid_depth, k=cfg.knn)
    trace.append(select_class_iou(head_forward(final_pool, params, cfg), class_id))
    return current, trace


def build_training_samples(scenes, cfg: IoUHeadConfig, jitter_cfg: JitterConfig, rng):
    """Pooled proposals with IoU targets: each ground-truth box plus jitters.

    Pooling does not depend on head parameters, so samples are pooled once
    and reused across epochs. The target is the best exact IoU against any
    ground-truth box in the scene; the class comes from the box that spawned
    the proposal.
    """
    samples = []
    for scene in scenes:
        if scene.labels is None:
            raise ValueError(f"scene {scene.scene_id} has no labels")
        gt_boxes = [b for b, _ in scene.labels]
        for gt, cls in scene.labels:
            proposals = [gt] + [jitter_box(gt, jitter_cfg, rng)
                                for _ in range(jitter_cfg.n_jitters_per_box)]
            for prop in proposals:
                target = max(iou3d(prop, g) for g in gt_boxes)
                pooled = pool(prop, scene.points, scene.features,
                              depth=cfg.grid_depth, k=cfg.knn)
                samples.append((pooled, cls, target))
    if not samples:
        raise ValueError("no ground-truth boxes in the given scenes")
    return samples


def train_iou_head(scenes, cfg: IoUHeadConfig | None = None,
                   jitter_cfg: JitterConfig | None = None,
                   lr: float = 1e-3, epochs: int = 20, batch_size: int = 64,
                   seed: int = 0, params: ParamVector | None = None):
    """Train the head on labeled scenes with L1 loss; returns (params, history).

    Seed features are fixed inputs here: gradients stop at the pooled
    features and only head parameters move.
    """
    cfg = cfg or IoUHeadConfig()
    jitter_cfg = jitter_cfg or JitterConfig()
    rng = np.random.default_rng([seed, 511])
    samples = build_training_samples(scenes, cfg, jitter_cfg, rng)
    if params is None:
        params = init_iou_head_params(cfg, np.random.default_rng([seed, 513]))
    opt = Adam(lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            grad_acc = params.zeros_like()
            loss = 0.0
            for si in chunk:
                pooled, cls, target = samples[si]
                out, cache = head_forward_cached(pooled, params, cfg)
                v = select_class_iou(out, cls)
                loss += abs(v - target)
                d_out = np.zeros_like(out)
                d_out[cls] = float(np.sign(v - target)) / len(chunk)
                g, _ = head_backward(cache, params, d_out)
                grad_acc.add_(g)
            opt.step(params, grad_acc)
            epoch_losses.append(loss / len(chunk))
        history.append(float(np.mean(epoch_losses)))
    return params, history
