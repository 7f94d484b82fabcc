"""Shared numerical oracles for the test suite."""

import numpy as np

from lumafield.assets import RadianceMap
from lumafield.lighting import luminance, pixel_directions, pixel_solid_angles, sphere_grid


def central_fd(f, arrays, indices, h=1e-6):
    """Central differences of scalar f() w.r.t. selected entries of arrays (mutated in place)."""
    out = []
    for k, idx in indices:
        a = arrays[k]
        v = a[idx]
        a[idx] = v + h
        fp = f()
        a[idx] = v - h
        fm = f()
        a[idx] = v
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def uniform_sphere(rng, n):
    """n uniform directions on the unit sphere (Gaussian normalisation)."""
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def stratified_sphere(rng, k):
    """k*k jittered equal-area strata in (z, phi); lower variance than plain sampling."""
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    z = 1.0 - 2.0 * (i + rng.random(i.shape)) / k
    phi = 2.0 * np.pi * (j + rng.random(j.shape)) / k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1).reshape(-1, 3)


def real_sh_l1(d):
    """Independent degree-1 real SH from the spherical-coordinate definition."""
    d = np.asarray(d, float)
    theta = np.arccos(np.clip(d[:, 2], -1, 1))
    phi = np.arctan2(d[:, 1], d[:, 0])
    k0 = np.sqrt(1.0 / (4.0 * np.pi))
    k1 = np.sqrt(3.0 / (4.0 * np.pi))
    # (Y00, Y1-1 ~ y, Y10 ~ z, Y11 ~ x)
    return np.stack([np.full(len(d), k0), k1 * np.sin(theta) * np.sin(phi),
                     k1 * np.cos(theta), k1 * np.sin(theta) * np.cos(phi)], axis=1)


def mc_irradiance(rng, sh, n, samples=1_000_000):
    """Monte-Carlo integral of the unclamped reconstruction times max(0, w.n) over the sphere."""
    w = uniform_sphere(rng, samples)
    radiance = real_sh_l1(w) @ np.asarray(sh, float).reshape(3, 4).T
    cos = np.maximum(w @ n, 0.0)
    return 4.0 * np.pi * np.mean(radiance * cos[:, None], axis=0)


def pinhole(position, look_at, fov, width, height):
    """Unit ray directions through pixel centres; row 0 at the top, +Y up, vertical fov."""
    pos = np.asarray(position, float)
    f = np.asarray(look_at, float) - pos
    f /= np.linalg.norm(f)
    r = np.cross(f, [0.0, 1.0, 0.0])
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    th = np.tan(fov / 2)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    sx = (2 * xs / width - 1) * th * width / height
    sy = (1 - 2 * ys / height) * th
    d = f + sx[..., None] * r + sy[..., None] * u
    return pos, d / np.linalg.norm(d, axis=-1, keepdims=True)


def sphere_oracle(position, look_at, fov, width, height, radius, albedo_fn, lights, k_s=0.0, e=32.0):
    """Closed-form Lambert (+ Phong) image of a sphere at the origin; black background.

    ``lights`` is a list of (direction, rgb radiance, solid angle); ``albedo_fn`` maps unit normals to RGB.
    """
    pos, d = pinhole(position, look_at, fov, width, height)
    b = d @ pos
    disc = b * b - (pos @ pos - radius * radius)
    img = np.zeros((height, width, 3))
    hit = disc > 0
    t = -b[hit] - np.sqrt(disc[hit])
    n = (pos + t[:, None] * d[hit]) / radius
    rho = albedo_fn(n)
    out = np.zeros((len(n), 3))
    for ld, rad, sa in lights:
        ld = np.asarray(ld, float) / np.linalg.norm(ld)
        cos = n @ ld
        lit = cos > 0
        refl = 2 * cos[:, None] * n - ld
        lobe = np.maximum(np.sum(-d[hit] * refl, axis=1), 0) ** e
        out += lit[:, None] * (rho / np.pi * cos[:, None] + k_s * lobe[:, None]) * np.asarray(rad) * sa
    img[hit] = out
    return img


def latlong_uv(n):
    """Texture coordinate of the lat-long sphere: u from atan2(z, x), v = 1 at the +Y pole."""
    theta = np.arccos(np.clip(n[:, 1], -1, 1))
    phi = np.arctan2(n[:, 2], n[:, 0]) % (2 * np.pi)
    return np.stack([phi / (2 * np.pi), 1 - theta / np.pi], axis=1)


def psnr_db(a, b):
    return 10 * np.log10(1.0 / np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def nearest_candidates(rows, cols, cand):
    # brute force ownership: every pixel belongs to the candidate with largest dot product
    dirs = pixel_directions(rows, cols).reshape(-1, 3)
    return np.argmax(dirs @ cand.T, axis=1)


def candidate_oracle(hdri, n, clip_pct=99.5):
    """Clipped pre-filter candidate radiance, computed without the library's gather."""
    cand = sphere_grid(n)
    owner = nearest_candidates(hdri.rows, hdri.cols, cand)
    sa = pixel_solid_angles(hdri.rows, hdri.cols).reshape(-1)
    vals = hdri.data.reshape(-1, 3).astype(np.float64)
    rad = np.zeros((n, 3))
    for k in range(3):
        rad[:, k] = np.bincount(owner, vals[:, k] * sa, n) / np.bincount(owner, sa, n)
    pix = luminance(vals)
    thresh = np.percentile(pix[pix > 0], clip_pct)
    lum = luminance(rad)
    over = lum > thresh
    rad[over] *= (thresh / lum[over])[:, None]
    return cand, rad


def smooth_map(seed, rows=64, cols=128):
    """Low-contrast positive map: a tinted linear lobe plus a polar band."""
    r = np.random.default_rng(seed)
    d = pixel_directions(rows, cols)
    base = r.uniform(0.5, 1.5, 3)
    lobe = r.normal(size=3)
    lobe *= 0.4 / np.linalg.norm(lobe)
    tint = r.uniform(0.2, 1.0, 3)
    data = base[None, None, :] * (1.0 + (d @ lobe))[..., None] + 0.2 * tint * d[..., 1:2] ** 2
    return RadianceMap(data.astype(np.float32))
