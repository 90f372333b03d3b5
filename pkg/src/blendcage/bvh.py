"""AABB tree over deformed tets: point location, canonicalization, ray spans.

The tree is stored in flat arrays and traversed inside numba kernels so that
per-sample queries stay cheap during training. Queries are pure and the tree
is immutable after construction, so concurrent reads are safe.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .tetmesh import DeformedVerts, TetCage

# Containment tolerance on barycentric coordinates; ties between abutting
# tets are broken by lowest tet index.
BARY_EPS = 1e-9

_LEAF_SIZE = 4
_MAX_STACK = 128


class TetBVH:
    """Median-split AABB tree over the tets of one deformed state."""

    def __init__(self, cage: TetCage, deformed: DeformedVerts, leaf_size: int = _LEAF_SIZE):
        cage.check_deformed(deformed)
        self.cage = cage
        self.deformed = deformed
        pos = deformed.positions
        corners = pos[cage.tets]  # (T, 4, 3)
        self.tet_min = np.ascontiguousarray(corners.min(axis=1))
        self.tet_max = np.ascontiguousarray(corners.max(axis=1))

        # Per-tet barycentric solve data. Deformed tets may invert; exactly
        # singular ones are flagged unusable and can never contain a point.
        self.tet_v0 = np.ascontiguousarray(corners[:, 0])
        e = np.stack(
            [corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0], corners[:, 3] - corners[:, 0]],
            axis=2,
        )
        det = np.linalg.det(e)
        self.usable = np.abs(det) > 1e-300
        e_safe = np.where(self.usable[:, None, None], e, np.eye(3))
        self.tet_einv = np.ascontiguousarray(np.linalg.inv(e_safe))

        self._build(leaf_size)

    def _build(self, leaf_size: int):
        t = len(self.tet_min)
        centroids = 0.5 * (self.tet_min + self.tet_max)
        order = np.arange(t, dtype=np.int64)
        max_nodes = max(1, 4 * t)
        node_min = np.empty((max_nodes, 3))
        node_max = np.empty((max_nodes, 3))
        node_left = np.full(max_nodes, -1, dtype=np.int64)
        node_right = np.full(max_nodes, -1, dtype=np.int64)
        node_start = np.zeros(max_nodes, dtype=np.int64)
        node_count = np.zeros(max_nodes, dtype=np.int64)

        n_nodes = 1
        stack = [(0, 0, t, 0)]  # (node, lo, hi, depth)
        while stack:
            node, lo, hi, depth = stack.pop()
            seg = order[lo:hi]
            node_min[node] = self.tet_min[seg].min(axis=0)
            node_max[node] = self.tet_max[seg].max(axis=0)
            if hi - lo <= leaf_size or depth >= 48:
                node_start[node] = lo
                node_count[node] = hi - lo
                continue
            axis = int(np.argmax(node_max[node] - node_min[node]))
            key = centroids[seg, axis]
            local = np.argsort(key, kind="stable")
            order[lo:hi] = seg[local]
            mid = lo + (hi - lo) // 2
            left, right = n_nodes, n_nodes + 1
            n_nodes += 2
            node_left[node] = left
            node_right[node] = right
            stack.append((right, mid, hi, depth + 1))
            stack.append((left, lo, mid, depth + 1))

        self.order = order
        self.node_min = np.ascontiguousarray(node_min[:n_nodes])
        self.node_max = np.ascontiguousarray(node_max[:n_nodes])
        self.node_left = node_left[:n_nodes]
        self.node_right = node_right[:n_nodes]
        self.node_start = node_start[:n_nodes]
        self.node_count = node_count[:n_nodes]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Locate each point: (tet_ids, barycentric). tet_id -1 means Miss.

        Among all containing tets the lowest tet index wins; barycentric
        coordinates sum to 1 by construction.
        """
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out_tet = np.empty(len(points), dtype=np.int64)
        out_bary = np.empty((len(points), 4), dtype=np.float64)
        _locate_kernel(
            points,
            self.node_min, self.node_max, self.node_left, self.node_right,
            self.node_start, self.node_count, self.order,
            self.tet_min, self.tet_max, self.tet_v0, self.tet_einv, self.usable,
            BARY_EPS, out_tet, out_bary,
        )
        return out_tet, out_bary

    def ray_spans(
        self, origins: np.ndarray, dirs: np.ndarray, t_near: float, t_far: float
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Conservative union interval of tet-AABB hits per ray.

        Returns (t_enter, t_exit, hit); the interval is clipped to
        [t_near, t_far] and hit=False marks a Miss.
        """
        origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        t0 = np.empty(len(origins))
        t1 = np.empty(len(origins))
        _ray_span_kernel(
            origins, dirs, float(t_near), float(t_far),
            self.node_min, self.node_max, self.node_left, self.node_right,
            self.node_start, self.node_count, self.order,
            self.tet_min, self.tet_max, t0, t1,
        )
        hit = t1 >= t0
        return t0, t1, hit


def locate_point(bvh: TetBVH, point: np.ndarray):
    """Single-point convenience wrapper; returns (tet_id, bary) or None on Miss."""
    tet, bary = bvh.locate(np.asarray(point, dtype=np.float64)[None, :])
    if tet[0] < 0:
        return None
    return int(tet[0]), bary[0]


def canonicalize_points(
    cage: TetCage, bvh: TetBVH, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map deformed-space points into the rest pose via barycentric transport.

    Returns (canonical (N,3), tet_ids (N,), bary (N,4)); Miss rows have
    tet_id -1 and NaN canonical coordinates.
    """
    from .kernels import bary_canonical

    tet_ids, bary = bvh.locate(points)
    canonical = np.empty((len(tet_ids), 3))
    bary_canonical(tet_ids, bary, cage.tets, cage.rest_vertices, canonical)
    return canonical, tet_ids, bary


def canonicalize(cage: TetCage, deformed: DeformedVerts, point: np.ndarray, bvh: TetBVH | None = None):
    """Single-point canonicalization; returns the rest-space point or None on Miss."""
    if bvh is None:
        bvh = TetBVH(cage, deformed)
    canonical, tet_ids, _ = canonicalize_points(cage, bvh, np.asarray(point, dtype=np.float64)[None, :])
    if tet_ids[0] < 0:
        return None
    return canonical[0]


@njit(cache=True)
def _locate_kernel(
    points, node_min, node_max, node_left, node_right, node_start, node_count,
    order, tet_min, tet_max, tet_v0, tet_einv, usable, bary_eps, out_tet, out_bary,
):
    stack = np.empty(_MAX_STACK, dtype=np.int64)
    for p in range(points.shape[0]):
        x = points[p, 0]
        y = points[p, 1]
        z = points[p, 2]
        best = -1
        b0 = b1 = b2 = b3 = 0.0
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nd = stack[top]
            if (
                x < node_min[nd, 0] or x > node_max[nd, 0]
                or y < node_min[nd, 1] or y > node_max[nd, 1]
                or z < node_min[nd, 2] or z > node_max[nd, 2]
            ):
                continue
            if node_count[nd] > 0:
                for i in range(node_start[nd], node_start[nd] + node_count[nd]):
                    t = order[i]
                    if best >= 0 and t >= best:
                        continue
                    if not usable[t]:
                        continue
                    if (
                        x < tet_min[t, 0] or x > tet_max[t, 0]
                        or y < tet_min[t, 1] or y > tet_max[t, 1]
                        or z < tet_min[t, 2] or z > tet_max[t, 2]
                    ):
                        continue
                    dx = x - tet_v0[t, 0]
                    dy = y - tet_v0[t, 1]
                    dz = z - tet_v0[t, 2]
                    c1 = tet_einv[t, 0, 0] * dx + tet_einv[t, 0, 1] * dy + tet_einv[t, 0, 2] * dz
                    c2 = tet_einv[t, 1, 0] * dx + tet_einv[t, 1, 1] * dy + tet_einv[t, 1, 2] * dz
                    c3 = tet_einv[t, 2, 0] * dx + tet_einv[t, 2, 1] * dy + tet_einv[t, 2, 2] * dz
                    c0 = 1.0 - c1 - c2 - c3
                    if c0 >= -bary_eps and c1 >= -bary_eps and c2 >= -bary_eps and c3 >= -bary_eps:
                        best = t
                        b0, b1, b2, b3 = c0, c1, c2, c3
            else:
                stack[top] = node_left[nd]
                top += 1
                stack[top] = node_right[nd]
                top += 1
        out_tet[p] = best
        out_bary[p, 0] = b0
        out_bary[p, 1] = b1
        out_bary[p, 2] = b2
        out_bary[p, 3] = b3


@njit(cache=True, inline="always")
def _slab(ox, oy, oz, dx, dy, dz, bmin, bmax, t_lo, t_hi):
    """Ray/AABB slab interval intersected with [t_lo, t_hi]; empty -> (1, 0)."""
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if abs(d[a]) < 1e-300:
            if o[a] < bmin[a] or o[a] > bmax[a]:
                return 1.0, 0.0
        else:
            inv = 1.0 / d[a]
            ta = (bmin[a] - o[a]) * inv
            tb = (bmax[a] - o[a]) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t_lo:
                t_lo = ta
            if tb < t_hi:
                t_hi = tb
            if t_lo > t_hi:
                return 1.0, 0.0
    return t_lo, t_hi


@njit(cache=True)
def _ray_span_kernel(
    origins, dirs, t_near, t_far,
    node_min, node_max, node_left, node_right, node_start, node_count,
    order, tet_min, tet_max, out_t0, out_t1,
):
    stack = np.empty(_MAX_STACK, dtype=np.int64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        span_lo = np.inf
        span_hi = -np.inf
        top = 1
        stack[0] = 0
        while top > 0:
            top -= 1
            nd = stack[top]
            lo, hi = _slab(ox, oy, oz, dx, dy, dz, node_min[nd], node_max[nd], t_near, t_far)
            if lo > hi:
                continue
            if node_count[nd] > 0:
                for i in range(node_start[nd], node_start[nd] + node_count[nd]):
                    t = order[i]
                    a, b = _slab(ox, oy, oz, dx, dy, dz, tet_min[t], tet_max[t], t_near, t_far)
                    if a <= b:
                        if a < span_lo:
                            span_lo = a
                        if b > span_hi:
                            span_hi = b
            else:
                stack[top] = node_left[nd]
                top += 1
                stack[top] = node_right[nd]
                top += 1
        if span_hi >= span_lo:
            out_t0[r] = span_lo
            out_t1[r] = span_hi
        else:
            out_t0[r] = 1.0
            out_t1[r] = 0.0
