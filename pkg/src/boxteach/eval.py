"""Detection evaluation: greedy matching, average precision, mAP, coverage.

Matching follows the standard protocol: per class, predictions are ranked by
score across the whole dataset and each one greedily claims the unmatched
ground-truth box in its scene with the highest IoU above the threshold.
Average precision comes in two flavors: the full area under the precision
envelope, and the R-recall-position approximation used for road-scene
benchmarks (R = 40). Coverage is class-agnostic recall of pseudo-labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import iou3d

AP_MODES = ("all-point", "r-point")
DEFAULT_RECALL_POSITIONS = 40
SCORE_KEYS = ("objectness", "combined")


@dataclass
class MatchRecord:
    """One scored prediction after matching."""

    score: float
    is_tp: bool
    scene_id: str
    pred_index: int
    gt_index: int | None


@dataclass
class EvalReport:
    """Per-class AP and the mean over classes present in the ground truth."""

    iou_thresh: float
    mode: str
    per_class_ap: dict
    map: float
    r_points: int | None = None
    coverage: float | None = None

    def to_dict(self) -> dict:
        return {
            "iou_thresh": self.iou_thresh,
            "mode": self.mode,
            "r_points": self.r_points,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map": self.map,
            "coverage": self.coverage,
        }


def _score_of(det, score: str) -> float:
    if score == "objectness":
        return det.objectness
    if score == "combined":
        return det.combined_score
    raise ValueError(f"unknown score key {score!r}")


def match_detections(preds_by_scene: dict, gts_by_scene: dict, iou_thresh: float,
                     score: str = "objectness"):
    """Greedy dataset-wide matching.

    Returns (matches, n_gt): per class, MatchRecord lists sorted by
    descending score (ties by scene id then prediction index), and the
    ground-truth count per class.
    """
    n_gt: dict[int, int] = {}
    for sid in gts_by_scene:
        for _, cls in gts_by_scene[sid]:
            n_gt[cls] = n_gt.get(cls, 0) + 1

    pool: dict[int, list] = {}
    for sid in sorted(preds_by_scene):
        for idx, det in enumerate(preds_by_scene[sid]):
            pool.setdefault(det.class_id, []).append((_score_of(det, score), sid, idx, det))

    matches: dict[int, list] = {}
    for cls, entries in sorted(pool.items()):
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        used: dict[str, set] = {}
        records = []
        for sc, sid, idx, det in entries:
            gts = gts_by_scene.get(sid, [])
            best_gt, best_iou = None, -1.0
            for gi, (gbox, gcls) in enumerate(gts):
                if gcls != cls or gi in used.get(sid, set()):
                    continue
                overlap = iou3d(det.box, gbox)
                if overlap >= iou_thresh and overlap > best_iou:
                    best_gt, best_iou = gi, overlap
            if best_gt is not None:
                used.setdefault(sid, set()).add(best_gt)
                records.append(MatchRecord(sc, True, sid, idx, best_gt))
            else:
                records.append(MatchRecord(sc, False, sid, idx, None))
        matches[cls] = records
    return matches, n_gt


def average_precision(match_records, n_gt: int, mode: str = "all-point",
                      r_points: int = DEFAULT_RECALL_POSITIONS) -> float:
    """AP from an ordered match list. n_gt == 0 gives 0 by definition."""
    if mode not in AP_MODES:
        raise ValueError(f"unknown AP mode {mode!r}")
    if n_gt <= 0 or not match_records:
        return 0.0
    tp = np.cumsum([1.0 if r.is_tp else 0.0 for r in match_records])
    ranks = np.arange(1, len(match_records) + 1)
    precision = tp / ranks
    recall = tp / n_gt

    if mode == "r-point":
        total = 0.0
        for j in range(1, r_points + 1):
            r = j / r_points
            mask = recall >= r - 1e-12
            if np.any(mask):
                total += float(precision[mask].max())
        return total / r_points

    # All-point mode: area under the running-max precision envelope.
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def map_at(preds_by_scene: dict, gts_by_scene: dict, thresholds,
           mode: str = "all-point", r_points: int = DEFAULT_RECALL_POSITIONS,
           score: str = "objectness"):
    """EvalReport per IoU threshold; mAP averages classes with >= 1 gt box."""
    reports = []
    for thresh in thresholds:
        matches, n_gt = match_detections(preds_by_scene, gts_by_scene, thresh, score)
        per_class = {}
        for cls, count in sorted(n_gt.items()):
            if count < 1:
                continue
            per_class[cls] = average_precision(matches.get(cls, []), count, mode, r_points)
        mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
        reports.append(EvalReport(iou_thresh=thresh, mode=mode, per_class_ap=per_class,
                                  map=mean_ap,
                                  r_points=r_points if mode == "r-point" else None))
    return reports


def coverage(pseudo_by_scene: dict, gts_by_scene: dict, iou_thresh: float) -> float:
    """Class-agnostic recall: fraction of ground-truth boxes that have at
    least one pseudo-label with IoU >= threshold."""
    total = 0
    hit = 0
    for sid, gts in gts_by_scene.items():
        pseudos = pseudo_by_scene.get(sid, [])
        for gbox, _ in gts:
            total += 1
            if any(iou3d(pl.box, gbox) >= iou_thresh for pl in pseudos):
                hit += 1
    return hit / total if total else 0.0


def mean_pseudo_true_iou(pseudo_by_scene: dict, gts_by_scene: dict) -> float:
    """Mean over pseudo-labels of their best IoU against hidden ground truth."""
    vals = []
    for sid, pseudos in pseudo_by_scene.items():
        gts = gts_by_scene.get(sid, [])
        for pl in pseudos:
            vals.append(max((iou3d(pl.box, g) for g, _ in gts), default=0.0))
    return float(np.mean(vals)) if vals else 0.0


def write_report(reports, path: str) -> None:
    doc = [r.to_dict() for r in reports]
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_pr_curves(preds_by_scene, gts_by_scene, iou_thresh, path, score="objectness"):
    """Optional CSV dump: class, recall, precision rows."""
    matches, n_gt = match_detections(preds_by_scene, gts_by_scene, iou_thresh, score)
    lines = ["class,recall,precision"]
    for cls in sorted(matches):
        if n_gt.get(cls, 0) < 1:
            continue
        tp = 0
        for rank, rec in enumerate(matches[cls], start=1):
            tp += 1 if rec.is_tp else 0
            lines.append(f"{cls},{tp / n_gt[cls]:.10f},{tp / rank:.10f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
