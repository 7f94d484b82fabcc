"""Axis-aligned BVH over triangles with numba traversal kernels.

The tree is built once in numpy (median split on the longest centroid axis)
and flattened into arrays so the closest-hit and any-hit kernels can run
without the GIL. Callers parallelise over ray tiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

HIT_EPS = 1e-4
LEAF_SIZE = 4
_STACK = 64


@dataclass(frozen=True, eq=False)
class BVH:
    node_min: np.ndarray  # (N, 3)
    node_max: np.ndarray  # (N, 3)
    node_left: np.ndarray  # (N,) child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # leaf range into prim_order
    node_count: np.ndarray  # 0 for interior nodes
    prim_order: np.ndarray  # (F,) triangle ids in leaf order
    v0: np.ndarray  # (F, 3) first vertex of each triangle
    e1: np.ndarray  # (F, 3) v1 - v0
    e2: np.ndarray  # (F, 3) v2 - v0

    @property
    def num_nodes(self) -> int:
        return len(self.node_left)

    def kernel_args(self):
        return (self.node_min, self.node_max, self.node_left, self.node_right,
                self.node_start, self.node_count, self.prim_order,
                self.v0, self.e1, self.e2)


def build_bvh(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = LEAF_SIZE) -> BVH:
    tri = vertices[faces]  # (F, 3, 3)
    tri_min = tri.min(axis=1)
    tri_max = tri.max(axis=1)
    centroid = tri.mean(axis=1)
    n_faces = len(faces)

    cap = max(1, 2 * n_faces)
    node_min = np.zeros((cap, 3))
    node_max = np.zeros((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    order = np.arange(n_faces, dtype=np.int64)

    n_nodes = 1
    stack = [(0, 0, n_faces)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        if len(idx):
            node_min[node] = tri_min[idx].min(axis=0)
            node_max[node] = tri_max[idx].max(axis=0)
        c = centroid[idx]
        extent = c.max(axis=0) - c.min(axis=0) if len(idx) else np.zeros(3)
        axis = int(np.argmax(extent))
        if hi - lo <= leaf_size or extent[axis] <= 0.0:
            start[node], count[node] = lo, hi - lo
            continue
        mid = (lo + hi) // 2
        part = np.argpartition(c[:, axis], mid - lo, kind="introselect")
        order[lo:hi] = idx[part]
        left[node], right[node] = n_nodes, n_nodes + 1
        n_nodes += 2
        stack.append((left[node], lo, mid))
        stack.append((right[node], mid, hi))

    v0 = tri[:, 0].copy()
    return BVH(
        node_min=node_min[:n_nodes].copy(),
        node_max=node_max[:n_nodes].copy(),
        node_left=left[:n_nodes].copy(),
        node_right=right[:n_nodes].copy(),
        node_start=start[:n_nodes].copy(),
        node_count=count[:n_nodes].copy(),
        prim_order=order,
        v0=v0,
        e1=tri[:, 1] - v0,
        e2=tri[:, 2] - v0,
    )


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _tri_test(ox, oy, oz, dx, dy, dz, v0, e1, e2, f):
    # Moller-Trumbore; returns (t, b1, b2), t < 0 on miss
    e1x, e1y, e1z = e1[f, 0], e1[f, 1], e1[f, 2]
    e2x, e2y, e2z = e2[f, 0], e2[f, 1], e2[f, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - v0[f, 0], oy - v0[f, 1], oz - v0[f, 2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _slab(lo, hi, o, inv):
    if inv == np.inf or inv == -np.inf:
        # ray parallel to this slab: inside (boundary included) or a clean miss
        if lo <= o <= hi:
            return -np.inf, np.inf
        return np.inf, -np.inf
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    return min(t0, t1), max(t0, t1)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, n):
    tnear, tfar = _slab(bmin[n, 0], bmax[n, 0], ox, ix)
    a, b = _slab(bmin[n, 1], bmax[n, 1], oy, iy)
    tnear, tfar = max(tnear, a), min(tfar, b)
    a, b = _slab(bmin[n, 2], bmax[n, 2], oz, iz)
    return max(tnear, a), min(tfar, b)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _trace(ox, oy, oz, dx, dy, dz, tmin, tmax, any_hit,
           bmin, bmax, left, right, start, count, order, v0, e1, e2):
    ix, iy, iz = 1.0 / dx, 1.0 / dy, 1.0 / dz
    best_t = tmax
    best_f = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(_STACK, np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        tn, tf = _box_entry(ox, oy, oz, ix, iy, iz, bmin, bmax, n)
        if tn > tf or tf < tmin or tn > best_t:
            continue
        if count[n] > 0:
            for k in range(start[n], start[n] + count[n]):
                f = order[k]
                t, u, v = _tri_test(ox, oy, oz, dx, dy, dz, v0, e1, e2, f)
                if t > tmin and (t < best_t or (t == best_t and f < best_f)):
                    best_t, best_f, best_u, best_v = t, f, u, v
                    if any_hit:
                        return best_t, best_f, best_u, best_v
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return best_t, best_f, best_u, best_v


@numba.njit(cache=True, nogil=True, error_model="numpy")
def closest_hits(origins, dirs, tmin, bmin, bmax, left, right, start, count, order,
                 v0, e1, e2, out_t, out_f, out_u, out_v):
    for r in range(origins.shape[0]):
        t, f, u, v = _trace(origins[r, 0], origins[r, 1], origins[r, 2],
                            dirs[r, 0], dirs[r, 1], dirs[r, 2], tmin, np.inf, False,
                            bmin, bmax, left, right, start, count, order, v0, e1, e2)
        out_t[r] = t if f >= 0 else np.inf
        out_f[r] = f
        out_u[r] = u
        out_v[r] = v


@numba.njit(cache=True, nogil=True, error_model="numpy")
def light_visibility(points, normals, offset, light_dirs, tmin,
                     bmin, bmax, left, right, start, count, order, v0, e1, e2, out):
    """out[r, l] = 1 when light l is above the horizon at point r and unoccluded."""
    for r in range(points.shape[0]):
        nx, ny, nz = normals[r, 0], normals[r, 1], normals[r, 2]
        ox = points[r, 0] + offset * nx
        oy = points[r, 1] + offset * ny
        oz = points[r, 2] + offset * nz
        for k in range(light_dirs.shape[0]):
            lx, ly, lz = light_dirs[k, 0], light_dirs[k, 1], light_dirs[k, 2]
            if nx * lx + ny * ly + nz * lz <= 0.0:
                out[r, k] = 0
                continue
            _, f, _, _ = _trace(ox, oy, oz, lx, ly, lz, tmin, np.inf, True,
                                bmin, bmax, left, right, start, count, order, v0, e1, e2)
            out[r, k] = 0 if f >= 0 else 1
