"""Oriented 3D box geometry: exact IoU, transforms, and distance queries.

Boxes are upright: a yaw rotation about the z axis is the only allowed
orientation. Rotated-box intersection therefore factors into a 2D convex
polygon clip in the ground plane times a 1D height overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

TWO_PI = 2.0 * math.pi

# Edge-inclusion tolerance for polygon clipping; overlaps thinner than this
# are treated as measure-zero contact and contribute no volume.
CLIP_EPS = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Fold an angle into [-pi, pi) by repeated +-2pi shifts."""
    yaw = float(yaw)
    while yaw >= math.pi:
        yaw -= TWO_PI
    while yaw < -math.pi:
        yaw += TWO_PI
    return yaw


def rot_z(yaw: float) -> np.ndarray:
    """3x3 rotation matrix about the upright axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class OrientedBox3D:
    """Box parameterized by center (m), per-axis size (m), and yaw (rad).

    Sizes must be strictly positive. Yaw is normalized into [-pi, pi) on
    construction.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3).copy()
        self.size = np.asarray(self.size, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(self.center)) or not np.all(np.isfinite(self.size)):
            raise ValueError("box parameters must be finite")
        if np.any(self.size <= 0.0):
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        self.yaw = normalize_yaw(self.yaw)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the box frame."""
        p = np.asarray(points, dtype=float) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = p.copy()
        out[..., 0] = p[..., 0] * c + p[..., 1] * s
        out[..., 1] = -p[..., 0] * s + p[..., 1] * c
        return out

    def to_world(self, local: np.ndarray) -> np.ndarray:
        """Map box-frame points (..., 3) back to world coordinates."""
        p = np.asarray(local, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = p.copy()
        out[..., 0] = p[..., 0] * c - p[..., 1] * s
        out[..., 1] = p[..., 0] * s + p[..., 1] * c
        return out + self.center


@dataclass
class Transform3D:
    """Scene-level transform: optional axis flips, yaw rotation, uniform scale.

    Application order is fixed: flip, then rotate, then scale.
    """

    flip_x: bool = False
    flip_y: bool = False
    rot_yaw: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")


def identity_transform() -> Transform3D:
    return Transform3D()


def invert_transform(t: Transform3D) -> Transform3D:
    """Exact inverse under the fixed flip -> rotate -> scale order.

    A single enabled flip conjugates the rotation to its inverse, so the
    inverse transform keeps the rotation sign in that case.
    """
    single_flip = t.flip_x != t.flip_y
    inv_rot = t.rot_yaw if single_flip else -t.rot_yaw
    return Transform3D(flip_x=t.flip_x, flip_y=t.flip_y,
                       rot_yaw=inv_rot, scale=1.0 / t.scale)


def volume(box: OrientedBox3D) -> float:
    """Box volume in m^3 (rotation-invariant)."""
    return float(np.prod(box.size))


# Corner sign pattern in Gray-code order over the (x, y, z) sign bits:
# the first four corners trace the bottom face counter-clockwise, the last
# four the top face in the mirrored order.
_GRAY_SIGNS = np.array(
    [
        [
            1.0 if (i ^ (i >> 1)) & 1 else -1.0,
            1.0 if (i ^ (i >> 1)) & 2 else -1.0,
            1.0 if (i ^ (i >> 1)) & 4 else -1.0,
        ]
        for i in range(8)
    ]
)


def corners(box: OrientedBox3D) -> np.ndarray:
    """8 ordered box corners (8, 3) in world coordinates."""
    local = _GRAY_SIGNS * (0.5 * box.size)
    return box.to_world(local)


def transform_points(points: np.ndarray, t: Transform3D) -> np.ndarray:
    """Apply flip -> rotate -> scale to world points (..., 3)."""
    p = np.asarray(points, dtype=float).copy()
    if t.flip_x:
        p[..., 0] = -p[..., 0]
    if t.flip_y:
        p[..., 1] = -p[..., 1]
    c, s = math.cos(t.rot_yaw), math.sin(t.rot_yaw)
    x, y = p[..., 0].copy(), p[..., 1].copy()
    p[..., 0] = x * c - y * s
    p[..., 1] = x * s + y * c
    return p * t.scale


def apply_transform(box: OrientedBox3D, t: Transform3D) -> OrientedBox3D:
    """Transform a box with the same flip -> rotate -> scale convention.

    Flips negate the matching center coordinate and mirror the yaw
    (flip_x: yaw -> pi - yaw, flip_y: yaw -> -yaw).
    """
    center = box.center.copy()
    yaw = box.yaw
    if t.flip_x:
        center[0] = -center[0]
        yaw = math.pi - yaw
    if t.flip_y:
        center[1] = -center[1]
        yaw = -yaw
    c, s = math.cos(t.rot_yaw), math.sin(t.rot_yaw)
    cx, cy = center[0], center[1]
    center[0] = cx * c - cy * s
    center[1] = cx * s + cy * c
    yaw = yaw + t.rot_yaw
    return OrientedBox3D(center=center * t.scale, size=box.size * t.scale, yaw=yaw)


def _bev_rect(box: OrientedBox3D):
    """Ground-plane footprint as 4 (x, y) tuples in counter-clockwise order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hx, hy = 0.5 * box.size[0], 0.5 * box.size[1]
    cx, cy = box.center[0], box.center[1]
    pts = []
    for sx, sy in ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)):
        lx, ly = sx * hx, sy * hy
        pts.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return pts


def _clip_convex(subject, clip):
    """Sutherland-Hodgman clip of convex polygon `subject` by CCW `clip`."""
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) < 3:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_pts = output
        output = []
        m = len(input_pts)
        for j in range(m):
            px, py = input_pts[j]
            qx, qy = input_pts[(j + 1) % m]
            p_in = ex * (py - ay) - ey * (px - ax) >= -CLIP_EPS
            q_in = ex * (qy - ay) - ey * (qx - ax) >= -CLIP_EPS
            if p_in:
                output.append((px, py))
            if p_in != q_in:
                # Intersection of segment pq with the clip edge line.
                dx, dy = qx - px, qy - py
                denom = ex * dy - ey * dx
                if abs(denom) > 1e-15:
                    u = (ex * (ay - py) - ey * (ax - px)) / denom
                    output.append((px + u * dx, py + u * dy))
    return output


def _polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) * 0.5


def intersection_volume(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Exact intersection volume of two upright boxes."""
    za0 = a.center[2] - 0.5 * a.size[2]
    za1 = a.center[2] + 0.5 * a.size[2]
    zb0 = b.center[2] - 0.5 * b.size[2]
    zb1 = b.center[2] + 0.5 * b.size[2]
    dz = min(za1, zb1) - max(za0, zb0)
    if dz < CLIP_EPS:
        return 0.0
    area = _polygon_area(_clip_convex(_bev_rect(a), _bev_rect(b)))
    if area < CLIP_EPS:
        return 0.0
    return area * dz


def iou3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Exact 3D IoU of two upright boxes; 0 for disjoint or touching boxes."""
    inter = intersection_volume(a, b)
    if inter <= 0.0:
        return 0.0
    union = volume(a) + volume(b) - inter
    return float(min(max(inter / union, 0.0), 1.0))


@numba.njit(cache=True)
def _count_hits(x, y, z, pa, pb):
    """Hit counts for two boxes over shared samples.

    pa/pb pack one box each as [cx, cy, cz, hx, hy, hz, cos_yaw, sin_yaw].
    Returns (hits in both, hits in the union).
    """
    n_both = 0
    n_union = 0
    for i in range(x.shape[0]):
        qx = x[i] - pa[0]
        qy = y[i] - pa[1]
        lx = qx * pa[6] + qy * pa[7]
        ly = -qx * pa[7] + qy * pa[6]
        in_a = abs(lx) <= pa[3] and abs(ly) <= pa[4] and abs(z[i] - pa[2]) <= pa[5]
        qx = x[i] - pb[0]
        qy = y[i] - pb[1]
        lx = qx * pb[6] + qy * pb[7]
        ly = -qx * pb[7] + qy * pb[6]
        in_b = abs(lx) <= pb[3] and abs(ly) <= pb[4] and abs(z[i] - pb[2]) <= pb[5]
        if in_a and in_b:
            n_both += 1
        if in_a or in_b:
            n_union += 1
    return n_both, n_union


def _pack_box(box: OrientedBox3D) -> np.ndarray:
    return np.array(
        [box.center[0], box.center[1], box.center[2],
         0.5 * box.size[0], 0.5 * box.size[1], 0.5 * box.size[2],
         math.cos(box.yaw), math.sin(box.yaw)],
        dtype=np.float32,
    )


def iou3d_monte_carlo(a: OrientedBox3D, b: OrientedBox3D,
                      n_samples: int = 1_000_000, seed: int = 0) -> float:
    """IoU estimate by uniform sampling of the joint axis-aligned hull.

    Intersection and both volumes are estimated by hit counting over the
    same sample set, so disjoint boxes return exactly 0. Deterministic for
    a given seed. Single-precision samples keep the per-pair cost low; the
    boundary rounding they introduce is far below counting noise.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    all_corners = np.vstack([corners(a), corners(b)])
    lo = all_corners.min(axis=0).astype(np.float32)
    span = all_corners.max(axis=0).astype(np.float32) - lo
    rng = np.random.default_rng(seed)
    x = rng.random(n_samples, dtype=np.float32) * span[0] + lo[0]
    y = rng.random(n_samples, dtype=np.float32) * span[1] + lo[1]
    z = rng.random(n_samples, dtype=np.float32) * span[2] + lo[2]
    n_both, n_union = _count_hits(x, y, z, _pack_box(a), _pack_box(b))
    if n_union == 0:
        return 0.0
    return n_both / n_union


def point_box_distance(p: np.ndarray, box: OrientedBox3D) -> float:
    """Euclidean distance from a point to the box surface; 0 if inside."""
    local = box.to_local(np.asarray(p, dtype=float).reshape(3))
    excess = np.maximum(np.abs(local) - 0.5 * box.size, 0.0)
    return float(np.linalg.norm(excess))


def contains_point(box: OrientedBox3D, p: np.ndarray, tol: float = 1e-9) -> bool:
    """True if the point lies inside or on the box (within tol)."""
    return point_box_distance(p, box) <= tol
