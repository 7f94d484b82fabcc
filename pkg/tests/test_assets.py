import struct
import zlib

import cv2
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lumafield.assets import (
    RadianceMap,
    TextureMap,
    decode_normal,
    float_to_rgbe,
    ground_plane,
    icosphere,
    intersect,
    intersect_many,
    load_hdri,
    load_mesh,
    load_texture,
    make_mesh,
    merge_meshes,
    rgbe_to_float,
    sample_texture,
    save_hdri,
    save_mesh,
    save_texture,
    shadow_visibility,
    srgb_to_linear,
    uv_sphere,
    visibility,
)
from lumafield.errors import AssetError

# ---------------------------------------------------------------- OBJ


def test_single_triangle_obj_normal_is_cross_product(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 2 0 0\nv 0 1 1\nf 1 2 3\n")
    mesh = load_mesh(p)
    assert mesh.num_faces == 1
    e = np.cross([2, 0, 0], [0, 1, 1])
    np.testing.assert_allclose(mesh.normals, np.tile(e / np.linalg.norm(e), (3, 1)), atol=1e-12)


def test_icosphere_obj_round_trip(tmp_path):
    ico = icosphere(2)
    assert ico.num_faces == 320
    save_mesh(ico, tmp_path / "ico.obj")
    mesh = load_mesh(tmp_path / "ico.obj")
    assert mesh.num_faces == 320
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)


def test_obj_without_normals_uses_area_weighting(tmp_path):
    ico = icosphere(1)
    lines = [f"v {x} {y} {z}" for x, y, z in ico.vertices]
    lines += ["f " + " ".join(str(i + 1) for i in f) for f in ico.faces]
    (tmp_path / "a.obj").write_text("\n".join(lines))
    mesh = load_mesh(tmp_path / "a.obj")
    # on a geodesic sphere the averaged normal points radially
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    assert np.min(np.sum(mesh.normals * radial, axis=1)) > 0.99


@pytest.mark.parametrize("body, message", [
    ("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n", "non-triangle face"),
    ("v 0 0 0\nv 1 0 0\nv 1 1 0\nf 1 2 7\n", "index out of range"),
    ("v 0 0 zero\n", "line 1"),
])
def test_obj_errors(tmp_path, body, message):
    p = tmp_path / "bad.obj"
    p.write_text(body)
    with pytest.raises(AssetError, match=message):
        load_mesh(p)


def test_obj_negative_indices_and_uv(tmp_path):
    p = tmp_path / "neg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf -3/-3 -2/-2 -1/-1\n")
    mesh = load_mesh(p)
    np.testing.assert_allclose(mesh.uvs, [[0, 0], [1, 0], [0, 1]])


def test_missing_mesh_names_path(tmp_path):
    with pytest.raises(AssetError, match="nowhere.obj"):
        load_mesh(tmp_path / "nowhere.obj")


def test_mesh_frames_orthonormal():
    m = uv_sphere(1.0, 16, 32)
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1.0, atol=1e-6)
    assert np.max(np.abs(np.sum(m.normals * m.tangents, axis=1))) < 1e-6


def test_bvh_leaf_bounds_contain_triangles():
    m = icosphere(2)
    b = m.bvh
    leaves = np.flatnonzero(b.node_count > 0)
    covered = []
    for n in leaves:
        prims = b.prim_order[b.node_start[n]:b.node_start[n] + b.node_count[n]]
        tri = m.vertices[m.faces[prims]].reshape(-1, 3)
        assert np.all(tri >= b.node_min[n] - 1e-12) and np.all(tri <= b.node_max[n] + 1e-12)
        covered.extend(prims)
    assert sorted(covered) == list(range(m.num_faces))


# ---------------------------------------------------------------- ray queries


def _brute_force(mesh, origins, dirs, tmin=1e-4):
    """All-triangle Moller-Trumbore scan in numpy (float64)."""
    tri = mesh.vertices[mesh.faces]
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    t_out = np.full(len(origins), np.inf)
    f_out = np.full(len(origins), -1)
    for r, (o, d) in enumerate(zip(origins, dirs)):
        p = np.cross(d, e2)
        det = np.sum(e1 * p, axis=1)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = o - v0
        u = np.sum(s * p, axis=1) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.sum(e2 * q, axis=1) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin)
        if hit.any():
            tt = np.where(hit, t, np.inf)
            best = np.flatnonzero(tt == tt.min())
            f_out[r] = best.min()
            t_out[r] = tt[best.min()]
    return t_out, f_out


def test_bvh_matches_brute_force_on_1000_rays(rng):
    mesh = merge_meshes(icosphere(2), uv_sphere(0.5, 8, 16, center=(1.2, 0.3, 0.0)), ground_plane(3.0, -1.0))
    origins = rng.uniform(-3, 3, (1000, 3))
    targets = rng.uniform(-1, 1, (1000, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hb = intersect_many(mesh, origins, dirs)
    t_ref, f_ref = _brute_force(mesh, origins, dirs)
    np.testing.assert_array_equal(hb.mask, f_ref >= 0)
    np.testing.assert_array_equal(hb.prim[hb.mask], f_ref[f_ref >= 0])
    np.testing.assert_allclose(hb.t[hb.mask], t_ref[f_ref >= 0], rtol=0, atol=1e-9)
    assert hb.mask.sum() > 300


def test_icosphere_center_ray_chord_bound():
    ico = icosphere(2)
    hit = intersect(ico, [0, 0, 3.0], [0, 0, -1.0])
    tri = ico.vertices[ico.faces]
    n = ico.face_normals()
    inradius = np.min(np.abs(np.sum(n * tri[:, 0], axis=1)))
    assert 2.0 - 1e-9 <= hit.t <= 3.0 - inradius + 1e-9


def test_hit_invariants(rng):
    mesh = uv_sphere(1.0, 24, 48)
    o = np.array([0.1, 0.2, 3.0])
    d = np.array([0.0, 0.0, -1.0])
    hit = intersect(mesh, o, d)
    np.testing.assert_allclose(hit.x0, o + hit.t * d, atol=1e-5)
    np.testing.assert_allclose(hit.tbn.T @ hit.tbn, np.eye(3), atol=1e-4)


def test_parallel_ray_outside_box_misses():
    assert intersect(icosphere(1), [0, 5, 0], [1, 0, 0]) is None


def test_vertex_hit_returns_vertex_uv():
    mesh = make_mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]),
                     uvs=np.array([[0.1, 0.2], [0.9, 0.2], [0.1, 0.8]]))
    for k, corner in enumerate(mesh.vertices):
        hit = intersect(mesh, corner + [0, 0, 1.0], [0, 0, -1.0])
        np.testing.assert_allclose(hit.uv, mesh.uvs[k], atol=1e-12)


def test_shadow_visibility_cases():
    tri = make_mesh(np.array([[-1, 0, -1], [1, 0, -1], [0, 0, 1.0]]), np.array([[0, 2, 1]]))
    up = np.array([0, 1.0, 0])
    assert shadow_visibility(tri, [0, 0, 0], up, up) == 1
    wall = merge_meshes(tri, ground_plane(2.0, 1.0))
    assert shadow_visibility(wall, [0, 0, 0], up, up) == 0
    v = visibility(wall, np.zeros((1, 3)), up[None], np.array([[0, 1.0, 0], [0, -1.0, 0]]))
    np.testing.assert_array_equal(v, [[0, 0]])  # blocked / below horizon


# ---------------------------------------------------------------- textures


def _write_png_raw(path, rows, bit_depth, color_type):
    """Minimal PNG writer (filter 0) for layouts cv2 cannot produce."""
    raw = b"".join(b"\x00" + bytes(r) for r in rows)
    w = len(rows[0]) * 8 // bit_depth // {0: 1, 2: 3, 6: 4}[color_type]

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))

    ihdr = struct.pack(">IIBBBBB", w, len(rows), bit_depth, color_type, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw))
                     + chunk(b"IEND", b""))


def test_texture_8bit_red(tmp_path):
    _write_png_raw(tmp_path / "r.png", [[255, 0, 0]], 8, 2)
    np.testing.assert_allclose(load_texture(tmp_path / "r.png").data[0, 0], [1, 0, 0])


def test_texture_srgb_decode_mid_grey(tmp_path):
    _write_png_raw(tmp_path / "g.png", [[188, 188, 188]], 8, 2)
    tex = load_texture(tmp_path / "g.png", "srgb-decoded")
    # oracle: standard sRGB EOTF evaluated by hand
    c = 188 / 255
    expect = ((c + 0.055) / 1.055) ** 2.4
    np.testing.assert_allclose(tex.data[0, 0], expect, rtol=1e-6)
    assert abs(expect - 0.5) < 0.005


def test_texture_16bit_and_alpha(tmp_path, rng):
    img = rng.random((5, 7, 3))
    save_texture(tmp_path / "t16.png", img, bit_depth=16)
    np.testing.assert_allclose(load_texture(tmp_path / "t16.png").data, img, atol=1 / 65535)
    bgra = np.zeros((2, 2, 4), np.uint8)
    bgra[..., 2] = 255
    bgra[..., 3] = 7
    cv2.imwrite(str(tmp_path / "a.png"), bgra)
    np.testing.assert_allclose(load_texture(tmp_path / "a.png").data[0, 0], [1, 0, 0])


def test_texture_bad_bit_depth(tmp_path):
    _write_png_raw(tmp_path / "b.png", [[0b10100000]], 1, 0)
    with pytest.raises(AssetError, match="unsupported bit depth 1"):
        load_texture(tmp_path / "b.png")


def test_sample_texture_examples():
    tex = TextureMap(np.array([[[0.0] * 3, [1.0] * 3]], np.float32), "linear")  # 1 row, 2 texels
    np.testing.assert_allclose(sample_texture(tex, [0.25, 0.5]), 0.0)
    np.testing.assert_allclose(sample_texture(tex, [0.75, 0.5]), 1.0)
    np.testing.assert_allclose(sample_texture(tex, [0.5, 0.5]), 0.5)
    np.testing.assert_allclose(sample_texture(tex, [-0.2, 0.5]), sample_texture(tex, [0.0, 0.5]))


@given(st.floats(0, 1), st.floats(0, 1), st.floats(-0.01, 0.01), st.floats(-0.01, 0.01))
def test_sample_texture_lipschitz(u, v, du, dv):
    data = np.random.default_rng(5).random((8, 6, 3)).astype(np.float32)
    tex = TextureMap(data, "linear")
    max_jump = max(np.abs(np.diff(data, axis=0)).max(), np.abs(np.diff(data, axis=1)).max())
    lip = max_jump * max(data.shape[:2])
    diff = np.abs(sample_texture(tex, [u + du, v + dv]) - sample_texture(tex, [u, v])).max()
    assert diff <= lip * (abs(du) + abs(dv)) + 1e-6


def test_srgb_eotf_endpoints():
    np.testing.assert_allclose(srgb_to_linear(np.array([0.0, 1.0])), [0.0, 1.0])


def test_decode_normal_examples():
    eye = np.eye(3)
    np.testing.assert_allclose(decode_normal([0.5, 0.5, 1.0], eye), [0, 0, 1])
    np.testing.assert_allclose(decode_normal([1.0, 0.5, 0.5], eye), [1, 0, 0])
    frame = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0.0]])
    np.testing.assert_allclose(decode_normal([0.5, 0.5, 0.5], frame), frame[:, 2])
    np.testing.assert_allclose(decode_normal([128 / 255] * 3, frame), frame[:, 2])


@given(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), st.integers(0, 1000))
def test_decode_normal_unit(rgb, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    n = decode_normal(rgb, q)
    assert abs(np.linalg.norm(n) - 1.0) < 1e-6


# ---------------------------------------------------------------- RGBE


def test_rgbe_decode_examples():
    np.testing.assert_allclose(rgbe_to_float(np.array([128, 0, 0, 129], np.uint8)), [1.0, 0, 0])
    np.testing.assert_array_equal(rgbe_to_float(np.array([0, 0, 0, 0], np.uint8)), [0, 0, 0])


def test_rgbe_round_trip_within_one_percent(rng):
    vals = np.exp(rng.uniform(-8, 8, (200, 3)))
    back = rgbe_to_float(float_to_rgbe(vals))
    peak = vals.max(axis=1, keepdims=True)
    assert np.all(np.abs(back - vals) <= 0.01 * peak)
    big = vals.max(axis=1)
    np.testing.assert_allclose(back.max(axis=1), big, rtol=0.01)


def test_hdr_file_round_trip(tmp_path, rng):
    data = (np.exp(rng.uniform(-3, 3, (6, 10, 3)))).astype(np.float32)
    save_hdri(tmp_path / "m.hdr", RadianceMap(data))
    back = load_hdri(tmp_path / "m.hdr").data
    # shared exponent: error is relative to the brightest channel of each pixel
    assert np.all(np.abs(back - data) <= 0.01 * data.max(axis=2, keepdims=True))


def _rle_encode_channel(vals):
    out = bytearray()
    i = 0
    while i < len(vals):
        j = i
        while j < len(vals) and vals[j] == vals[i] and j - i < 127:
            j += 1
        if j - i >= 3:
            out += bytes([128 + j - i, vals[i]])
            i = j
        else:
            k = i
            while k < len(vals) and k - i < 128 and not (k + 2 < len(vals) and vals[k] == vals[k + 1] == vals[k + 2]):
                k += 1
            k = max(k, i + 1)
            out += bytes([k - i]) + bytes(vals[i:k])
            i = k
    return bytes(out)


def test_hdr_reads_rle_scanlines(tmp_path, rng):
    rows, cols = 4, 40
    rgbe = rng.integers(0, 4, (rows, cols, 4)).astype(np.uint8)
    rgbe[..., 3] = 130
    rgbe[:, 10:30] = rgbe[:, 10:11]  # long runs
    body = bytearray()
    for r in range(rows):
        body += bytes([2, 2, cols >> 8, cols & 255])
        for c in range(4):
            body += _rle_encode_channel(list(rgbe[r, :, c]))
    (tmp_path / "rle.hdr").write_bytes(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 4 +X 40\n" + bytes(body))
    np.testing.assert_allclose(load_hdri(tmp_path / "rle.hdr").data, rgbe_to_float(rgbe))


def test_hdr_errors(tmp_path):
    (tmp_path / "bad.hdr").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(AssetError, match="bad magic"):
        load_hdri(tmp_path / "bad.hdr")
    (tmp_path / "short.hdr").write_bytes(b"#?RADIANCE\n\n-Y 2 +X 2\n" + bytes(9))
    with pytest.raises(AssetError, match="truncated scanline"):
        load_hdri(tmp_path / "short.hdr")
    (tmp_path / "rot.hdr").write_bytes(b"#?RADIANCE\n\n+X 2 -Y 2\n" + bytes(16))
    with pytest.raises(AssetError, match="resolution"):
        load_hdri(tmp_path / "rot.hdr")
