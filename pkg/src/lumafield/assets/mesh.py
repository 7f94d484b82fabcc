"""Triangle meshes: OBJ I/O, shading frames and ray queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lumafield.assets.bvh import BVH, HIT_EPS, build_bvh, closest_hits, light_visibility
from lumafield.errors import AssetError


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64
    uvs: np.ndarray  # (V, 2)
    normals: np.ndarray  # (V, 3) unit
    tangents: np.ndarray  # (V, 3) unit, orthogonal to normals
    bitangents: np.ndarray  # (V, 3)
    bvh: BVH

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


@dataclass(frozen=True)
class Hit:
    t: float
    x0: np.ndarray
    uv: np.ndarray
    tbn: np.ndarray  # columns: tangent, bitangent, normal
    prim: int


@dataclass(frozen=True, eq=False)
class HitBatch:
    """Vectorised intersection results; rows with ``mask == False`` are misses."""

    mask: np.ndarray
    t: np.ndarray
    prim: np.ndarray
    bary: np.ndarray  # (R, 3) weights of v0, v1, v2
    x0: np.ndarray
    uv: np.ndarray
    tbn: np.ndarray  # (R, 3, 3)

    def __len__(self) -> int:
        return len(self.mask)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _any_perpendicular(n: np.ndarray) -> np.ndarray:
    helper = np.where(np.abs(n[..., :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    return _normalize(np.cross(n, helper))


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of face normals (the raw cross product carries the area)."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    acc = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    return _normalize(acc)


def orthonormal_frames(normals: np.ndarray, tangents: np.ndarray, bitangents: np.ndarray):
    """Gram-Schmidt tangents against normals; bitangent = n x t with the input handedness."""
    t = tangents - np.sum(tangents * normals, axis=-1, keepdims=True) * normals
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    t = np.where(tn > 1e-12, t / np.where(tn > 0, tn, 1.0), _any_perpendicular(normals))
    b = np.cross(normals, t)
    sign = np.where(np.sum(b * bitangents, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    return t, b * sign


def uv_tangents(vertices, faces, uvs, normals):
    tri = vertices[faces]
    tuv = uvs[faces]
    dp1, dp2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    du1, dv1 = tuv[:, 1, 0] - tuv[:, 0, 0], tuv[:, 1, 1] - tuv[:, 0, 1]
    du2, dv2 = tuv[:, 2, 0] - tuv[:, 0, 0], tuv[:, 2, 1] - tuv[:, 0, 1]
    r = du1 * dv2 - du2 * dv1
    ok = np.abs(r) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, r, 1.0), 0.0)[:, None]
    ft = (dp1 * dv2[:, None] - dp2 * dv1[:, None]) * inv
    fb = (dp2 * du1[:, None] - dp1 * du2[:, None]) * inv
    t_acc = np.zeros_like(vertices, dtype=np.float64)
    b_acc = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(t_acc, faces[:, k], ft)
        np.add.at(b_acc, faces[:, k], fb)
    return orthonormal_frames(normals, t_acc, b_acc)


def make_mesh(vertices, faces, uvs=None, normals=None) -> TriangleMesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise AssetError("face index out of range")
    uvs = np.zeros((len(vertices), 2)) if uvs is None else np.asarray(uvs, dtype=np.float64)
    if normals is None:
        normals = vertex_normals(vertices, faces)
    else:
        normals = np.asarray(normals, dtype=np.float64)
        lengths = np.linalg.norm(normals, axis=1)
        normals = np.where(lengths[:, None] > 1e-12, normals / np.maximum(lengths, 1e-300)[:, None],
                           vertex_normals(vertices, faces))
    tangents, bitangents = uv_tangents(vertices, faces, uvs, normals)
    return TriangleMesh(vertices, faces, np.ascontiguousarray(uvs), np.ascontiguousarray(normals),
                        tangents, bitangents, build_bvh(vertices, faces))


def merge_meshes(*meshes: TriangleMesh) -> TriangleMesh:
    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
    return make_mesh(
        np.concatenate([m.vertices for m in meshes]),
        np.concatenate([m.faces + o for m, o in zip(meshes, offsets)]),
        np.concatenate([m.uvs for m in meshes]),
        np.concatenate([m.normals for m in meshes]),
    )


def _obj_index(token: str, n: int, lineno: int, kind: str) -> int:
    try:
        i = int(token)
    except ValueError:
        raise AssetError(f"line {lineno}: bad {kind} index {token!r}") from None
    i = i - 1 if i > 0 else n + i
    if not 0 <= i < n:
        raise AssetError(f"line {lineno}: {kind} index out of range ({token})")
    return i


def load_mesh(path) -> TriangleMesh:
    """Load a triangulated OBJ (v/vt/vn/f, 1-based or negative indices)."""
    path = Path(path)
    if not path.is_file():
        raise AssetError(f"mesh not found: {path}")
    pos, tex, nrm = [], [], []
    corners: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                pos.append([float(a) for a in args[:3]])
                if len(pos[-1]) != 3:
                    raise ValueError
            elif tag == "vt":
                tex.append([float(a) for a in args[:2]] + [0.0] * (2 - len(args[:2])))
            elif tag == "vn":
                nrm.append([float(a) for a in args[:3]])
                if len(nrm[-1]) != 3:
                    raise ValueError
        except ValueError:
            raise AssetError(f"line {lineno}: cannot parse {raw.strip()!r}") from None
        if tag != "f":
            continue
        if len(args) != 3:
            raise AssetError(f"line {lineno}: non-triangle face ({len(args)} vertices)")
        for a in args:
            fields = a.split("/")
            vi = _obj_index(fields[0], len(pos), lineno, "vertex")
            ti = _obj_index(fields[1], len(tex), lineno, "texcoord") if len(fields) > 1 and fields[1] else -1
            ni = _obj_index(fields[2], len(nrm), lineno, "normal") if len(fields) > 2 and fields[2] else -1
            corners.append((vi, ti, ni))
    if not corners:
        raise AssetError(f"{path}: no faces")

    # one output vertex per distinct (v, vt, vn) corner
    keys, inverse = np.unique(np.array(corners, dtype=np.int64), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = np.asarray(pos, dtype=np.float64)[keys[:, 0]]
    uvs = np.where(keys[:, 1:2] >= 0, np.asarray(tex or [[0.0, 0.0]], dtype=np.float64)[np.maximum(keys[:, 1], 0)], 0.0)
    faces = inverse.reshape(-1, 3)
    if np.all(keys[:, 2] >= 0):
        normals = np.asarray(nrm, dtype=np.float64)[keys[:, 2]]
    else:
        # average over the position index so seams split by vt stay smooth
        pos_arr = np.asarray(pos, dtype=np.float64)
        normals = vertex_normals(pos_arr, keys[:, 0][faces])[keys[:, 0]]
    return make_mesh(vertices, faces, uvs, normals)


def save_mesh(mesh: TriangleMesh, path) -> None:
    lines = ["# lumafield mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
    lines += ["f " + " ".join(f"{i + 1}/{i + 1}/{i + 1}" for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def intersect_many(mesh: TriangleMesh, origins: np.ndarray, dirs: np.ndarray, tmin: float = HIT_EPS) -> HitBatch:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t = np.empty(n)
    f = np.empty(n, np.int64)
    b1 = np.empty(n)
    b2 = np.empty(n)
    closest_hits(origins, dirs, tmin, *mesh.bvh.kernel_args(), t, f, b1, b2)
    mask = f >= 0
    bary = np.stack([1.0 - b1 - b2, b1, b2], axis=1)
    bary[~mask] = 0.0
    fid = np.where(mask, f, 0)
    corner = mesh.faces[fid]  # (R, 3)
    w = bary[:, :, None]
    uv = np.sum(mesh.uvs[corner] * w, axis=1)
    nrm = _normalize(np.sum(mesh.normals[corner] * w, axis=1))
    tan = np.sum(mesh.tangents[corner] * w, axis=1)
    bit = np.sum(mesh.bitangents[corner] * w, axis=1)
    tan, bit = orthonormal_frames(nrm, tan, bit)
    tbn = np.stack([tan, bit, nrm], axis=2)
    x0 = origins + np.where(mask, t, 0.0)[:, None] * dirs
    return HitBatch(mask, t, f, bary, x0, uv, tbn)


def intersect(mesh: TriangleMesh, origin, direction) -> Hit | None:
    """Nearest hit with t > 1e-4 along a unit-direction ray, or None."""
    hb = intersect_many(mesh, np.asarray(origin)[None], np.asarray(direction)[None])
    if not hb.mask[0]:
        return None
    return Hit(float(hb.t[0]), hb.x0[0], hb.uv[0], hb.tbn[0], int(hb.prim[0]))


def visibility(mesh: TriangleMesh, points: np.ndarray, normals: np.ndarray, light_dirs: np.ndarray,
               offset: float = 1e-3) -> np.ndarray:
    """Binary shadow-ray matrix (R, L): 1 where the light is above the horizon and unblocked."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    light_dirs = np.ascontiguousarray(light_dirs, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(points), len(light_dirs)), np.uint8)
    light_visibility(points, normals, offset, light_dirs, HIT_EPS, *mesh.bvh.kernel_args(), out)
    return out


def shadow_visibility(mesh: TriangleMesh, x0, light_dir, normal, offset: float = 1e-3) -> int:
    """0 if the shadow ray from x0 (pushed off the surface along the normal) is blocked, else 1."""
    x0 = np.asarray(x0, dtype=np.float64)
    light_dir = np.asarray(light_dir, dtype=np.float64)
    hit = intersect(mesh, x0 + offset * np.asarray(normal, dtype=np.float64), light_dir)
    return 0 if hit is not None else 1
