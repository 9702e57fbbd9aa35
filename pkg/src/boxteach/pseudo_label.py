"""Pseudo-labels from teacher detections: joint confidence filtering,
suppression variants, final transform/argmax processing, and the
supervision-association rule.

Filtering keeps a detection only if it clears all three confidence gates
(objectness, best class probability, estimated IoU). Suppression groups
same-class detections that overlap a cluster seed; the classic variants keep
only the seed while keep-half suppression retains the better-scored half of
each cluster, trading a little duplication for supervision coverage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox3D, Transform3D, apply_transform, iou3d, point_box_distance

SUPPRESSION_MODES = ("obj-nms", "iou-nms", "iou-lhs")

# Train-time and test-time suppression share this overlap threshold.
DEFAULT_SUPPRESSION_IOU = 0.25

# Supervision radius: a detection learns from pseudo-labels only when its
# generating anchor lies within this distance of some pseudo box.
DEFAULT_ASSOCIATION_RADIUS = 0.3

# Per-class localization gates for the three-class road-scene setting
# (large rigid class filtered hard, small classes leniently).
THREE_CLASS_TAU_IOU = {0: 0.5, 1: 0.25, 2: 0.25}


@dataclass
class Detection:
    """One proposal: box, objectness s, class distribution, estimated IoU v,
    and the anchor point that generated it."""

    box: OrientedBox3D
    objectness: float
    class_probs: np.ndarray
    pred_iou: float
    anchor: np.ndarray

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=float)
        self.anchor = np.asarray(self.anchor, dtype=float).reshape(3)
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness {self.objectness} outside [0, 1]")
        if not 0.0 <= self.pred_iou <= 1.0:
            raise ValueError(f"pred_iou {self.pred_iou} outside [0, 1]")
        if np.any(self.class_probs < -1e-12):
            raise ValueError("class probabilities must be non-negative")
        if abs(self.class_probs.sum() - 1.0) > 1e-6:
            raise ValueError("class probabilities must sum to 1")

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def combined_score(self) -> float:
        """Ranking metric for IoU-guided suppression: objectness times
        estimated IoU."""
        return self.objectness * self.pred_iou


@dataclass
class ThresholdConfig:
    """Joint confidence gates. tau_iou is either one scalar or a per-class
    mapping from class id to threshold."""

    tau_obj: float = 0.9
    tau_cls: float = 0.9
    tau_iou: float | dict = 0.25

    def __post_init__(self):
        for v in (self.tau_obj, self.tau_cls):
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [0, 1]")
        for v in (self.tau_iou.values() if isinstance(self.tau_iou, dict)
                  else [self.tau_iou]):
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [0, 1]")

    def iou_threshold(self, class_id: int) -> float:
        if isinstance(self.tau_iou, dict):
            return self.tau_iou[class_id]
        return self.tau_iou


@dataclass
class PseudoLabel:
    """Final supervision target: transformed box, hard class, diagnostic score."""

    box: OrientedBox3D
    class_id: int
    score: float


def filter_detections(dets, thresholds: ThresholdConfig):
    """Keep detections passing all three gates with strict inequalities."""
    kept = []
    for det in dets:
        cls = det.class_id
        if (det.objectness > thresholds.tau_obj
                and det.class_probs[cls] > thresholds.tau_cls
                and det.pred_iou > thresholds.iou_threshold(cls)):
            kept.append(det)
    return kept


def _cluster(dets, scores, iou_thresh):
    """Greedy same-class clustering: repeatedly seed with the best-scored
    unassigned detection and absorb its overlapping same-class peers.
    Ties on score resolve to the lower original index."""
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    unassigned = set(order)
    clusters = []
    for seed in order:
        if seed not in unassigned:
            continue
        members = [j for j in order
                   if j in unassigned and dets[j].class_id == dets[seed].class_id
                   and (j == seed or iou3d(dets[seed].box, dets[j].box) >= iou_thresh)]
        unassigned.difference_update(members)
        clusters.append(members)
    return clusters


def suppress(dets, mode: str = "iou-lhs", iou_thresh: float = DEFAULT_SUPPRESSION_IOU):
    """Deduplicate detections; returns survivors in original input order.

    obj-nms ranks by objectness and keeps cluster seeds; iou-nms ranks by
    objectness times estimated IoU and keeps seeds; iou-lhs uses the same
    ranking but keeps the top ceil(n/2) of each cluster, so a singleton
    always survives.
    """
    if mode not in SUPPRESSION_MODES:
        raise ValueError(f"unknown suppression mode {mode!r}")
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    if not dets:
        return []
    if mode == "obj-nms":
        scores = [d.objectness for d in dets]
    else:
        scores = [d.combined_score for d in dets]
    clusters = _cluster(dets, scores, iou_thresh)
    keep: set[int] = set()
    for members in clusters:
        if mode == "iou-lhs":
            ranked = sorted(members, key=lambda i: (-dets[i].combined_score, i))
            keep.update(ranked[:math.ceil(len(members) / 2)])
        else:
            keep.add(members[0])
    return [dets[i] for i in sorted(keep)]


def finalize_pseudo_labels(kept, t: Transform3D):
    """Carry surviving teacher boxes into the student frame and harden the
    class distribution to its argmax."""
    return [PseudoLabel(box=apply_transform(det.box, t), class_id=det.class_id,
                        score=det.combined_score) for det in kept]


def associate_for_supervision(dets, pseudo, radius: float = DEFAULT_ASSOCIATION_RADIUS):
    """Per detection: (supervise?, index of the matched pseudo-label or None).

    A detection is supervised when its anchor lies within `radius` of any
    pseudo box; the match is the pseudo-label with the smallest anchor
    distance, ties to the lower index.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    out = []
    for det in dets:
        best, best_d = None, math.inf
        for idx, pl in enumerate(pseudo):
            d = point_box_distance(det.anchor, pl.box)
            if d < best_d - 1e-15:
                best, best_d = idx, d
        if best is not None and best_d <= radius:
            out.append((True, best))
        else:
            out.append((False, None))
    return out


# --- JSON forms, shared by the evaluation module and the CLI -----------------


def detection_to_dict(det: Detection) -> dict:
    return {
        "box": {"center": det.box.center.tolist(), "size": det.box.size.tolist(),
                "yaw": det.box.yaw},
        "objectness": det.objectness,
        "class_probs": det.class_probs.tolist(),
        "pred_iou": det.pred_iou,
        "anchor": det.anchor.tolist(),
    }


def detection_from_dict(d: dict) -> Detection:
    box = d["box"]
    return Detection(
        box=OrientedBox3D(box["center"], box["size"], box["yaw"]),
        objectness=d["objectness"],
        class_probs=d["class_probs"],
        pred_iou=d["pred_iou"],
        anchor=d["anchor"],
    )


def pseudo_label_to_dict(pl: PseudoLabel) -> dict:
    return {
        "box": {"center": pl.box.center.tolist(), "size": pl.box.size.tolist(),
                "yaw": pl.box.yaw},
        "class_id": pl.class_id,
        "score": pl.score,
    }


def pseudo_label_from_dict(d: dict) -> PseudoLabel:
    box = d["box"]
    return PseudoLabel(box=OrientedBox3D(box["center"], box["size"], box["yaw"]),
                       class_id=int(d["class_id"]), score=float(d["score"]))


def write_detections(dets_by_scene: dict, path: str) -> None:
    doc = {sid: [detection_to_dict(d) for d in dets]
           for sid, dets in dets_by_scene.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_detections(path: str) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    return {sid: [detection_from_dict(d) for d in dets] for sid, dets in doc.items()}
