"""Procedural point-cloud scenes with box labels, plus bit-exact file I/O.

Scenes stand in for real indoor scans: yaw-rotated boxes are placed in a
room, points are sampled on box surfaces plus background clutter, and each
point carries a feature vector that encodes its offset from the owning box
center in the box frame together with a class-specific pattern. Background
points carry a distinct pattern. The encoding makes box alignment genuinely
inferable from pooled features, which is what the IoU head trains on.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox3D, iou3d

# Feature layout: [0:3] offset from box center in the box frame (m),
# [3:6] the same offset divided by the box size, [6:] class pattern.
OFFSET_DIMS = 6


class SceneGenerationError(RuntimeError):
    """Raised when box placement cannot satisfy the overlap constraint."""


class SceneParseError(ValueError):
    """Raised on malformed scene or split files."""


@dataclass
class GeneratorConfig:
    """Scene generator parameters. Defaults give a 3-class desk-scale room."""

    n_objects_range: tuple = (2, 6)
    n_classes: int = 3
    # Per-class (low, high) size bounds, one 3-vector pair per class.
    class_size_priors: tuple = (
        ((0.30, 0.30, 0.30), (0.60, 0.60, 0.60)),
        ((0.60, 0.60, 0.60), (1.10, 1.10, 1.10)),
        ((0.90, 0.30, 0.40), (1.50, 0.55, 0.80)),
    )
    room_xy: float = 3.5
    room_z: tuple = (0.0, 2.4)
    points_per_object: int = 80
    background_points: int = 160
    feature_dim: int = 16
    feature_noise: float = 0.02
    max_overlap_iou: float = 0.05
    max_place_attempts: int = 60

    def __post_init__(self):
        if self.feature_dim < OFFSET_DIMS + 1:
            raise ValueError(f"feature_dim must be at least {OFFSET_DIMS + 1}")
        if len(self.class_size_priors) != self.n_classes:
            raise ValueError("need one size prior per class")

    def to_dict(self) -> dict:
        return {
            "n_objects_range": list(self.n_objects_range),
            "n_classes": self.n_classes,
            "class_size_priors": [[list(lo), list(hi)] for lo, hi in self.class_size_priors],
            "room_xy": self.room_xy,
            "room_z": list(self.room_z),
            "points_per_object": self.points_per_object,
            "background_points": self.background_points,
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "max_overlap_iou": self.max_overlap_iou,
            "max_place_attempts": self.max_place_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            n_objects_range=tuple(d["n_objects_range"]),
            n_classes=d["n_classes"],
            class_size_priors=tuple(
                (tuple(lo), tuple(hi)) for lo, hi in d["class_size_priors"]
            ),
            room_xy=d["room_xy"],
            room_z=tuple(d["room_z"]),
            points_per_object=d["points_per_object"],
            background_points=d["background_points"],
            feature_dim=d["feature_dim"],
            feature_noise=d["feature_noise"],
            max_overlap_iou=d["max_overlap_iou"],
            max_place_attempts=d["max_place_attempts"],
        )


@dataclass
class SceneSample:
    """One scene: points (N, 3), features (N, F), optional box labels."""

    scene_id: str
    points: np.ndarray
    features: np.ndarray
    labels: list | None = None  # list of (OrientedBox3D, class_id)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if len(self.points) != len(self.features) or len(self.points) < 1:
            raise ValueError("points and features must have equal length >= 1")

    def without_labels(self) -> "SceneSample":
        return SceneSample(self.scene_id, self.points, self.features, labels=None)


def class_patterns(n_classes: int, feature_dim: int) -> np.ndarray:
    """Fixed pattern rows, one per class plus a final background row.

    Rows are scaled cosine-basis vectors; distinct rows are near-orthogonal
    so pooled features separate classes cleanly.
    """
    dim = feature_dim - OFFSET_DIMS
    rows = np.zeros((n_classes + 1, feature_dim))
    for c in range(n_classes + 1):
        j = np.arange(dim)
        rows[c, OFFSET_DIMS:] = 0.8 * np.cos(math.pi * (2 * j + 1) * (c + 1) / (2.0 * dim))
    return rows


def _sample_on_surface(rng, box: OrientedBox3D, n: int) -> np.ndarray:
    """Uniform samples on the box surface, returned in the box frame."""
    sx, sy, sz = box.size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 2))
    local = np.empty((n, 3))
    for i in range(n):
        a, b = u[i]
        f = face[i]
        if f < 2:
            local[i] = ((0.5 if f == 0 else -0.5) * sx, a * sy, b * sz)
        elif f < 4:
            local[i] = (a * sx, (0.5 if f == 2 else -0.5) * sy, b * sz)
        else:
            local[i] = (a * sx, b * sy, (0.5 if f == 4 else -0.5) * sz)
    return local


def _place_boxes(rng, params: GeneratorConfig, n_objects: int):
    placed = []
    room_z0, room_z1 = params.room_z
    for _ in range(n_objects):
        ok = False
        for _attempt in range(params.max_place_attempts):
            cls = int(rng.integers(params.n_classes))
            lo, hi = params.class_size_priors[cls]
            size = rng.uniform(lo, hi)
            yaw = rng.uniform(-math.pi, math.pi)
            r_xy = 0.5 * math.hypot(size[0], size[1])
            if r_xy >= params.room_xy or size[2] >= room_z1 - room_z0:
                continue
            cx = rng.uniform(-params.room_xy + r_xy, params.room_xy - r_xy)
            cy = rng.uniform(-params.room_xy + r_xy, params.room_xy - r_xy)
            cz = rng.uniform(room_z0 + 0.5 * size[2], room_z1 - 0.5 * size[2])
            box = OrientedBox3D([cx, cy, cz], size, yaw)
            if all(iou3d(box, other) < params.max_overlap_iou for other, _ in placed):
                placed.append((box, cls))
                ok = True
                break
        if not ok:
            raise SceneGenerationError(
                f"could not place {n_objects} boxes with pairwise IoU < "
                f"{params.max_overlap_iou}; generator params are too dense")
    return placed


def generate_scene(seed, params: GeneratorConfig, scene_id: str | None = None) -> SceneSample:
    """Deterministic scene for a seed (an int or a sequence of ints)."""
    rng = np.random.default_rng(seed)
    if scene_id is None:
        scene_id = f"scene_{int(np.asarray(seed).flat[0]):08d}"
    n_objects = int(rng.integers(params.n_objects_range[0], params.n_objects_range[1] + 1))
    labels = _place_boxes(rng, params, n_objects)
    patterns = class_patterns(params.n_classes, params.feature_dim)

    points, feats = [], []
    for box, cls in labels:
        local = _sample_on_surface(rng, box, params.points_per_object)
        f = np.tile(patterns[cls], (len(local), 1))
        f[:, 0:3] += local
        f[:, 3:6] += local / box.size
        points.append(box.to_world(local))
        feats.append(f)

    n_bg = params.background_points
    bg = np.column_stack([
        rng.uniform(-params.room_xy, params.room_xy, n_bg),
        rng.uniform(-params.room_xy, params.room_xy, n_bg),
        rng.uniform(params.room_z[0], params.room_z[1], n_bg),
    ])
    points.append(bg)
    feats.append(np.tile(patterns[params.n_classes], (n_bg, 1)))

    points = np.vstack(points)
    feats = np.vstack(feats)
    feats += rng.normal(0.0, params.feature_noise, feats.shape)
    return SceneSample(scene_id, points, feats, labels=labels)


@dataclass
class DatasetSplit:
    """Labeled/unlabeled partition with evaluation-only hidden ground truth.

    Unlabeled samples have their labels stripped; the withheld boxes live in
    `hidden_labels`, keyed by scene id, and are only meant to be read by the
    evaluation code (coverage and pseudo-label quality metrics). Validation
    scenes keep their labels and never enter training.
    """

    labeled: list
    unlabeled: list
    label_ratio: float
    val: list = field(default_factory=list)
    hidden_labels: dict = field(default_factory=dict)

    def hidden_gt(self, scene_id: str):
        """Evaluation-only access to withheld labels of an unlabeled scene."""
        return self.hidden_labels[scene_id]


def make_split(n_scenes: int, label_ratio: float, seed: int,
               params: GeneratorConfig | None = None, n_val: int = 0) -> DatasetSplit:
    """Generate scenes and split them into labeled and unlabeled sets.

    Per-scene RNG streams are derived from (seed, scene index), so growing
    the dataset never reshuffles earlier scenes.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if not 0.0 < label_ratio <= 1.0:
        raise ValueError("label_ratio must be in (0, 1]")
    params = params or GeneratorConfig()
    scenes = [generate_scene([seed, i], params, scene_id=f"scene_{i:05d}")
              for i in range(n_scenes)]
    order = np.random.default_rng([seed, 900_001]).permutation(n_scenes)
    n_labeled = math.ceil(n_scenes * label_ratio)
    labeled = [scenes[i] for i in order[:n_labeled]]
    unl_full = [scenes[i] for i in order[n_labeled:]]
    hidden = {s.scene_id: s.labels for s in unl_full}
    unlabeled = [s.without_labels() for s in unl_full]
    val = [generate_scene([seed, 10_000_000 + i], params, scene_id=f"val_{i:05d}")
           for i in range(n_val)]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled,
                        label_ratio=label_ratio, val=val, hidden_labels=hidden)


# ---------------------------------------------------------------------------
# File formats. Scenes are single JSON documents; a dataset directory holds
# one file per scene plus split.json naming the partition and the generator
# parameters. Floats use Python repr, which round-trips exactly.
# ---------------------------------------------------------------------------


def _label_to_dict(box: OrientedBox3D, cls: int) -> dict:
    return {"center": box.center.tolist(), "size": box.size.tolist(),
            "yaw": box.yaw, "class": int(cls)}


def _label_from_dict(d: dict, path: str, idx: int):
    for key in ("center", "size", "yaw", "class"):
        if key not in d:
            raise SceneParseError(f"{path}: labels[{idx}] missing key '{key}'")
    return (OrientedBox3D(d["center"], d["size"], d["yaw"]), int(d["class"]))


def write_scene(sample: SceneSample, path: str) -> None:
    doc = {
        "scene_id": sample.scene_id,
        "points": sample.points.tolist(),
        "features": sample.features.tolist(),
        "labels": None if sample.labels is None else
                  [_label_to_dict(b, c) for b, c in sample.labels],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def read_scene(path: str) -> SceneSample:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("scene_id", "points", "features"):
        if key not in doc:
            raise SceneParseError(f"{path}: missing key '{key}'")
    points = np.asarray(doc["points"], dtype=float)
    features = np.asarray(doc["features"], dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise SceneParseError(f"{path}: 'points' must be an Nx3 array")
    if features.ndim != 2 or len(features) != len(points):
        raise SceneParseError(f"{path}: 'features' must align with 'points'")
    raw_labels = doc.get("labels")
    labels = None
    if raw_labels is not None:
        labels = [_label_from_dict(d, path, i) for i, d in enumerate(raw_labels)]
    return SceneSample(doc["scene_id"], points, features, labels=labels)


def write_dataset(split: DatasetSplit, params: GeneratorConfig, out_dir: str) -> None:
    """Write every scene (labels included) plus split.json."""
    os.makedirs(out_dir, exist_ok=True)
    for sample in split.labeled + split.val:
        write_scene(sample, os.path.join(out_dir, sample.scene_id + ".json"))
    for sample in split.unlabeled:
        full = SceneSample(sample.scene_id, sample.points, sample.features,
                           labels=split.hidden_labels[sample.scene_id])
        write_scene(full, os.path.join(out_dir, sample.scene_id + ".json"))
    doc = {
        "labeled": [s.scene_id for s in split.labeled],
        "unlabeled": [s.scene_id for s in split.unlabeled],
        "val": [s.scene_id for s in split.val],
        "label_ratio": split.label_ratio,
        "generator": params.to_dict(),
    }
    with open(os.path.join(out_dir, "split.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(dataset_dir: str):
    """Load a dataset directory; returns (DatasetSplit, GeneratorConfig).

    Labels of unlabeled scenes are moved into the split's hidden map so the
    training path never sees them.
    """
    split_path = os.path.join(dataset_dir, "split.json")
    try:
        with open(split_path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SceneParseError(f"{split_path}: not found")
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"{split_path}: invalid JSON ({exc})") from exc
    for key in ("labeled", "unlabeled", "label_ratio", "generator"):
        if key not in doc:
            raise SceneParseError(f"{split_path}: missing key '{key}'")

    def load(scene_id):
        return read_scene(os.path.join(dataset_dir, scene_id + ".json"))

    labeled = [load(sid) for sid in doc["labeled"]]
    unl_full = [load(sid) for sid in doc["unlabeled"]]
    val = [load(sid) for sid in doc.get("val", [])]
    hidden = {s.scene_id: s.labels for s in unl_full}
    split = DatasetSplit(
        labeled=labeled,
        unlabeled=[s.without_labels() for s in unl_full],
        label_ratio=float(doc["label_ratio"]),
        val=val,
        hidden_labels=hidden,
    )
    return split, GeneratorConfig.from_dict(doc["generator"])
