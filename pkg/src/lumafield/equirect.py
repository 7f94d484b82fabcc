"""Equirectangular map geometry.

u = (col + 0.5) / cols maps to phi = 2*pi*u and v = (row + 0.5) / rows maps
to theta = pi*v measured from the +Y pole, so
direction = (sin t cos p, cos t, sin t sin p).
"""

from __future__ import annotations

import numpy as np

from lumafield.assets.hdr import RadianceMap

LUMA = np.array([0.2126, 0.7152, 0.0722])


def equirect_to_dir(u, v) -> np.ndarray:
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    theta = np.pi * v
    phi = 2.0 * np.pi * u
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1)


def dir_to_equirect(d) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(d, dtype=np.float64)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    u = np.mod(np.arctan2(d[..., 2], d[..., 0]) / (2.0 * np.pi), 1.0)
    return u, v


def pixel_directions(rows: int, cols: int) -> np.ndarray:
    u = (np.arange(cols) + 0.5) / cols
    v = (np.arange(rows) + 0.5) / rows
    return equirect_to_dir(u[None, :], v[:, None])


def pixel_solid_angles(rows: int, cols: int) -> np.ndarray:
    """Exact solid angle of each equirect pixel (latitude band / cols); sums to 4*pi."""
    edges = np.cos(np.pi * np.arange(rows + 1) / rows)
    band = 2.0 * np.pi * (edges[:-1] - edges[1:]) / cols
    return np.repeat(band[:, None], cols, axis=1)


def luminance(rgb) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ LUMA


def lookup(hdri: RadianceMap, dirs) -> np.ndarray:
    """Bilinear radiance along directions (u wraps, v clamps)."""
    u, v = dir_to_equirect(dirs)
    rows, cols = hdri.rows, hdri.cols
    x = u * cols - 0.5
    y = np.clip(v * rows - 0.5, 0.0, rows - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), rows - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0, x1 = x0 % cols, (x0 + 1) % cols
    y1 = np.minimum(y0 + 1, rows - 1)
    d = hdri.data.astype(np.float64)
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy
