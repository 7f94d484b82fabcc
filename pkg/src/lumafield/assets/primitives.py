"""Procedural meshes used by the reference-dataset generator and tests."""

from __future__ import annotations

import numpy as np

from lumafield.assets.mesh import TriangleMesh, make_mesh


def sphere_uv(dirs: np.ndarray) -> np.ndarray:
    """Latitude-longitude texture coordinate of unit directions (matches ``uv_sphere``)."""
    theta = np.arccos(np.clip(dirs[..., 1], -1.0, 1.0))
    phi = np.mod(np.arctan2(dirs[..., 2], dirs[..., 0]), 2.0 * np.pi)
    return np.stack([phi / (2.0 * np.pi), 1.0 - theta / np.pi], axis=-1)


def uv_sphere(radius: float = 1.0, n_lat: int = 64, n_lon: int = 128, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Y-up latitude-longitude sphere with a duplicated seam column and exact normals."""
    theta = np.linspace(0.0, np.pi, n_lat + 1)
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon + 1)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], axis=-1).reshape(-1, 3)
    uvs = np.stack([ph / (2.0 * np.pi), 1.0 - th / np.pi], axis=-1).reshape(-1, 2)
    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    a, b = idx[:-1, :-1], idx[1:, :-1]
    c, d = idx[1:, 1:], idx[:-1, 1:]
    upper = np.stack([a, d, b], axis=-1)[1:].reshape(-1, 3)  # row 0 collapses at the north pole
    lower = np.stack([d, c, b], axis=-1)[:-1].reshape(-1, 3)  # last row collapses at the south pole
    faces = np.concatenate([upper, lower])
    return make_mesh(dirs * radius + np.asarray(center, dtype=np.float64), faces, uvs, dirs)


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere with 20 * 4**subdivisions faces."""
    g = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [[-1, g, 0], [1, g, 0], [-1, -g, 0], [1, -g, 0], [0, -1, g], [0, 1, g],
             [0, -1, -g], [0, 1, -g], [g, 0, -1], [g, 0, 1], [-g, 0, -1], [-g, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.asarray(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.add(verts[i], verts[j])
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    dirs = np.asarray(verts)
    return make_mesh(dirs * radius, np.asarray(faces), sphere_uv(dirs), dirs)


def ground_plane(half_size: float = 4.0, height: float = 0.0) -> TriangleMesh:
    """Two-triangle square in the xz plane facing +y."""
    s = half_size
    verts = np.array([[-s, height, -s], [-s, height, s], [s, height, s], [s, height, -s]], float)
    uvs = np.array([[0.0, 1.0], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return make_mesh(verts, faces, uvs, np.tile([0.0, 1.0, 0.0], (4, 1)))
