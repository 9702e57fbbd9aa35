"""Differentiable 3D grid feature pooling over oriented boxes.

A D x D x D lattice of virtual points spans the box; each lattice point
takes an inverse-squared-distance weighted average of its k nearest seed
features. Features vary smoothly with box center, size, and yaw away from
neighbor-set switch points, and the analytic Jacobians below make gradient
ascent on box parameters possible. The hard box-query pooling at the bottom
is kept as a counter-example: its output jumps whenever the box surface
crosses a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import OrientedBox3D, rot_z

# Below this distance a lattice point is treated as coincident with a seed:
# it copies the seed feature exactly and its weight gradients are zero.
COINCIDENT_EPS = 1e-9


def grid_offsets(depth: int) -> np.ndarray:
    """Fractional cell-center offsets u in (-0.5, 0.5), shape (depth^3, 3).

    Ordering is row-major with x fastest: index m = (iz * depth + iy) * depth + ix.
    """
    if depth < 1:
        raise ValueError("grid depth must be >= 1")
    ii = (np.arange(depth) + 0.5) / depth - 0.5
    zz, yy, xx = np.meshgrid(ii, ii, ii, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])


def make_grid(box: OrientedBox3D, depth: int) -> np.ndarray:
    """World-frame lattice points (depth^3, 3) spanning the box."""
    local = grid_offsets(depth) * box.size
    return box.to_world(local)


def _nearest(grid: np.ndarray, seed_xyz: np.ndarray, k: int):
    """Indices (G, k) of the k nearest seeds per grid point and squared
    distances (G, k). Ties resolve to the lower seed index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    m = len(seed_xyz)
    if m < k:
        raise ValueError(f"need at least k={k} seed points, got {m}")
    diff = grid[:, None, :] - seed_xyz[None, :, :]
    d2 = np.einsum("gsd,gsd->gs", diff, diff)
    if m <= 128:
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    else:
        # Partition with a few spare candidates, then order those by
        # (distance, seed index); far cheaper than a full sort per row.
        kth = min(m - 1, k + 3)
        cand = np.argpartition(d2, kth, axis=1)[:, :kth + 1]
        cand_d2 = np.take_along_axis(d2, cand, axis=1)
        sel = np.lexsort((cand, cand_d2), axis=1)[:, :k]
        order = np.take_along_axis(cand, sel, axis=1)
    return order, np.take_along_axis(d2, order, axis=1)


def interpolate(grid: np.ndarray, seed_xyz: np.ndarray, seed_feats: np.ndarray,
                k: int):
    """Inverse-squared-distance interpolation of seed features onto a grid.

    Returns (features (G, F), weights (G, k), neighbor_ids (G, k)). A grid
    point lying on a seed copies that seed's feature exactly.
    """
    seed_xyz = np.asarray(seed_xyz, dtype=float)
    seed_feats = np.asarray(seed_feats, dtype=float)
    neighbor_ids, d2 = _nearest(np.asarray(grid, dtype=float), seed_xyz, k)
    weights = np.zeros_like(d2)
    coincident = d2[:, 0] < COINCIDENT_EPS ** 2
    safe = ~coincident
    weights[safe] = 1.0 / d2[safe]
    weights[coincident, 0] = 1.0
    gathered = seed_feats[neighbor_ids]  # (G, k, F)
    features = np.einsum("gk,gkf->gf", weights, gathered) / weights.sum(axis=1, keepdims=True)
    return features, weights, neighbor_ids


@dataclass
class GridPoolResult:
    """Pooled lattice: world points, box-frame coordinates, features, and
    the interpolation bookkeeping (neighbor ids and raw weights)."""

    grid_points: np.ndarray    # (G, 3) world frame
    local_coords: np.ndarray   # (G, 3) box frame
    features: np.ndarray       # (G, F)
    neighbor_ids: np.ndarray   # (G, k)
    weights: np.ndarray        # (G, k)
    frac_offsets: np.ndarray   # (G, 3) cell-center fractions, used by Jacobians


@dataclass
class PoolJacobian:
    """Derivatives of the pooled quantities w.r.t. box parameters.

    Feature derivatives chain through the world lattice point; box-frame
    coordinates depend on size only (entry-wise via the cell fractions).
    """

    feat_center: np.ndarray   # (G, F, 3)
    feat_size: np.ndarray     # (G, F, 3)
    feat_yaw: np.ndarray      # (G, F)
    local_size: np.ndarray    # (G, 3) diagonal of d local / d size


def pool(box: OrientedBox3D, seed_xyz: np.ndarray, seed_feats: np.ndarray,
         depth: int = 4, k: int = 3) -> GridPoolResult:
    u = grid_offsets(depth)
    local = u * box.size
    grid = box.to_world(local)
    features, weights, neighbor_ids = interpolate(grid, seed_xyz, seed_feats, k)
    return GridPoolResult(grid_points=grid, local_coords=local, features=features,
                          neighbor_ids=neighbor_ids, weights=weights, frac_offsets=u)


def pool_with_jacobian(box: OrientedBox3D, seed_xyz: np.ndarray,
                       seed_feats: np.ndarray, depth: int = 4, k: int = 3):
    """Pool plus analytic Jacobians, treating neighbor sets as constant.

    d f / d g = sum_i (d w_i / d g) (f_i - f) / sum(w) with
    d w_i / d g = -2 (g - x_i) / d_i^4; the lattice point g is linear in the
    center, linear in the size through the cell fractions, and rotates with
    yaw. Coincident seeds pin the feature, so their gradient is zero.
    """
    seed_xyz = np.asarray(seed_xyz, dtype=float)
    seed_feats = np.asarray(seed_feats, dtype=float)
    result = pool(box, seed_xyz, seed_feats, depth, k)
    n_grid, n_feat = result.features.shape

    rot = rot_z(box.yaw)
    drot = np.array([
        [-math.sin(box.yaw), -math.cos(box.yaw), 0.0],
        [math.cos(box.yaw), -math.sin(box.yaw), 0.0],
        [0.0, 0.0, 0.0],
    ])

    feat_center = np.zeros((n_grid, n_feat, 3))
    feat_size = np.zeros((n_grid, n_feat, 3))
    feat_yaw = np.zeros((n_grid, n_feat))
    for m in range(n_grid):
        nb = result.neighbor_ids[m]
        diffs = result.grid_points[m] - seed_xyz[nb]           # (k, 3)
        d2 = np.einsum("kd,kd->k", diffs, diffs)
        if d2[0] < COINCIDENT_EPS ** 2:
            continue
        dw_dg = -2.0 * diffs / (d2 ** 2)[:, None]              # (k, 3)
        resid = seed_feats[nb] - result.features[m]            # (k, F)
        jac_g = resid.T @ dw_dg / result.weights[m].sum()      # (F, 3)
        feat_center[m] = jac_g
        feat_size[m] = (jac_g @ rot) * result.frac_offsets[m][None, :]
        feat_yaw[m] = jac_g @ (drot @ (result.frac_offsets[m] * box.size))

    jac = PoolJacobian(feat_center=feat_center, feat_size=feat_size,
                       feat_yaw=feat_yaw, local_size=result.frac_offsets.copy())
    return result, jac


def box_query_pool(box: OrientedBox3D, seed_xyz: np.ndarray, seed_feats: np.ndarray):
    """Features of seeds strictly inside the box, with their indices.

    The hard cropping boundary makes the output a step function of the box
    parameters: growing the box past a seed changes the cardinality at a
    single threshold, which is exactly the discontinuity grid pooling avoids.
    """
    seed_xyz = np.asarray(seed_xyz, dtype=float)
    seed_feats = np.asarray(seed_feats, dtype=float)
    local = box.to_local(seed_xyz)
    inside = np.all(np.abs(local) < 0.5 * box.size, axis=1)
    idx = np.flatnonzero(inside)
    return seed_feats[idx], idx
