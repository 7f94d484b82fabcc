"""HDRI-derived lighting: directional light sets, light embeddings and OLAT maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from lumafield.assets.hdr import RadianceMap
from lumafield.errors import AssetError, ConfigError
from lumafield.equirect import (  # noqa: F401  (re-exported)
    LUMA,
    dir_to_equirect,
    equirect_to_dir,
    lookup,
    luminance,
    pixel_directions,
    pixel_solid_angles,
)
from lumafield.shfield import sh_basis_l1

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class DirectionalLightSample:
    direction: np.ndarray
    radiance: np.ndarray
    solid_angle: float


@dataclass(frozen=True, eq=False)
class DirectLightSet:
    """Distant lights stored as parallel arrays (direction toward the light)."""

    directions: np.ndarray  # (L, 3) unit
    radiance: np.ndarray  # (L, 3) linear RGB
    solid_angles: np.ndarray  # (L,) steradians
    source: str = ""

    def __len__(self) -> int:
        return len(self.directions)

    @property
    def samples(self) -> list[DirectionalLightSample]:
        return [DirectionalLightSample(d, r, float(s))
                for d, r, s in zip(self.directions, self.radiance, self.solid_angles)]

    def power(self) -> np.ndarray:
        """Radiance times solid angle summed over the set (RGB)."""
        return (self.radiance * self.solid_angles[:, None]).sum(axis=0)

    def scaled(self, k: float) -> "DirectLightSet":
        return DirectLightSet(self.directions, self.radiance * k, self.solid_angles, self.source)


def single_light(direction, radiance, solid_angle: float = 1.0) -> DirectLightSet:
    d = np.asarray(direction, dtype=np.float64)
    return DirectLightSet(d[None] / np.linalg.norm(d), np.asarray(radiance, float).reshape(1, 3),
                          np.array([float(solid_angle)]), "single")


def save_light_set(path, lights: DirectLightSet) -> None:
    rows = np.column_stack([lights.directions, lights.radiance, lights.solid_angles])
    np.savetxt(path, rows, fmt="%.9g", header="dx dy dz r g b sr")


def load_light_set(path) -> DirectLightSet:
    path = Path(path)
    try:
        rows = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise AssetError(f"{path}: {exc}") from None
    if rows.shape[1] != 7:
        raise AssetError(f"{path}: expected 7 columns 'dx dy dz r g b sr'")
    return DirectLightSet(rows[:, :3], rows[:, 3:6], rows[:, 6], str(path))


def sphere_grid(n: int) -> np.ndarray:
    """Deterministic Fibonacci lattice of ``n`` unit directions."""
    if n < 1:
        raise ConfigError("sphere_grid needs N >= 1")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def _gather(hdri_values: np.ndarray, rows: int, cols: int, candidates: np.ndarray,
            fallback: np.ndarray) -> np.ndarray:
    """Solid-angle weighted mean of the pixels whose nearest candidate is each candidate.

    Candidates owning no pixel (map coarser than the grid) take ``fallback``.
    """
    dirs = pixel_directions(rows, cols).reshape(-1, 3)
    sa = pixel_solid_angles(rows, cols).reshape(-1)
    _, owner = cKDTree(candidates).query(dirs)
    vals = hdri_values.reshape(rows * cols, -1)
    acc = np.zeros((len(candidates), vals.shape[1]))
    np.add.at(acc, owner, vals * sa[:, None])
    area = np.bincount(owner, weights=sa, minlength=len(candidates))
    out = fallback.reshape(len(candidates), -1).astype(np.float64).copy()
    has = area > 0
    out[has] = acc[has] / area[has, None]
    return out


def importance_map(lum: np.ndarray) -> np.ndarray:
    """Luminance plus local contrast against the 3x3 neighbourhood (u wraps)."""
    padded = np.pad(lum, ((1, 1), (0, 0)), mode="edge")
    mean = ndimage.uniform_filter(padded, size=3, mode="wrap")[1:-1]
    return lum + np.abs(lum - mean)


def importance_sample_lights(hdri: RadianceMap, n: int = 800, clip_pct: float = 99.5,
                             imp_thresh: float = 0.05, uniform: bool = False) -> DirectLightSet:
    """Turn an HDRI into a directional light set over a Fibonacci candidate grid.

    Each candidate takes the mean radiance of the map pixels nearest to it.
    ``uniform=True`` keeps every lit candidate with no clipping or filtering.
    Otherwise candidate luminance is clipped at the ``clip_pct`` percentile of
    the map's lit pixels, candidates whose importance falls below
    ``imp_thresh`` times the mean are dropped (keeping at least
    ``max(32, n // 16)`` of the brightest), and survivors are rescaled per
    channel so the retained power equals the clipped candidate power.
    """
    if not 0.0 < clip_pct <= 100.0:
        raise ConfigError("clip_pct must be in (0, 100]")
    if imp_thresh < 0.0:
        raise ConfigError("imp_thresh must be >= 0")
    cand = sphere_grid(n)
    sa = 4.0 * np.pi / n
    data = hdri.data.astype(np.float64)
    rows, cols = hdri.rows, hdri.cols
    pix_lum = luminance(data)
    radiance = _gather(data, rows, cols, cand, lookup(hdri, cand))
    lum = luminance(radiance)
    lit = lum > 0.0
    if not lit.any():
        return DirectLightSet(np.array([[0.0, 1.0, 0.0]]), np.zeros((1, 3)), np.array([sa]), "black")
    if uniform:
        return DirectLightSet(cand[lit], radiance[lit], np.full(lit.sum(), sa), "uniform")

    thresh = np.percentile(pix_lum[pix_lum > 0.0], clip_pct) if (pix_lum > 0).any() else lum.max()
    over = lum > thresh
    radiance[over] *= (thresh / lum[over])[:, None]
    lum = np.minimum(lum, thresh)

    pix_imp = importance_map(np.minimum(pix_lum, thresh))
    imp = _gather(pix_imp, rows, cols, cand, np.maximum(lum, 0.0)).reshape(-1)
    keep = lit & (imp >= imp_thresh * imp[lit].mean())
    floor = min(max(32, n // 16), int(lit.sum()))
    if keep.sum() < floor:
        by_brightness = np.argsort(-lum, kind="stable")
        keep[by_brightness[:floor]] = True
        keep &= lit

    before = radiance.sum(axis=0)
    after = radiance[keep].sum(axis=0)
    gain = np.where(after > 0.0, before / np.where(after > 0.0, after, 1.0), 1.0)
    return DirectLightSet(cand[keep], radiance[keep] * gain, np.full(keep.sum(), sa), "importance")


def hdri_power(hdri: RadianceMap) -> np.ndarray:
    sa = pixel_solid_angles(hdri.rows, hdri.cols)
    return np.einsum("rc,rck->k", sa, hdri.data.astype(np.float64))


def _band_overlap(n_out: int, n_in: int, measure) -> np.ndarray:
    """(n_out, n_in) matrix of ``measure`` over overlapping [0,1] sub-intervals."""
    eo = np.linspace(0.0, 1.0, n_out + 1)
    ei = np.linspace(0.0, 1.0, n_in + 1)
    lo = np.maximum(eo[:-1, None], ei[None, :-1])
    hi = np.minimum(eo[1:, None], ei[None, 1:])
    return np.where(hi > lo, measure(lo, hi), 0.0)


def downsample_hdri(hdri: RadianceMap, rows: int, cols: int) -> RadianceMap:
    """Solid-angle weighted box filter; preserves total power exactly."""
    if rows < 1 or cols < 1:
        raise ConfigError("downsample target dimensions must be positive")
    if rows > hdri.rows or cols > hdri.cols:
        raise ConfigError("downsample target larger than source")
    if (rows, cols) == (hdri.rows, hdri.cols):
        return hdri
    band = _band_overlap(rows, hdri.rows, lambda a, b: np.cos(np.pi * a) - np.cos(np.pi * b))
    span = _band_overlap(cols, hdri.cols, lambda a, b: b - a)
    data = hdri.data.astype(np.float64)
    num = np.einsum("ri,ijk,cj->rck", band, data, span)
    den = np.einsum("ri,cj->rc", band, span)
    return RadianceMap((num / den[..., None]).astype(np.float32))


@dataclass(frozen=True, eq=False)
class LightEmbedding:
    features: np.ndarray  # (P, 6): direction xyz, radiance rgb
    solid_angles: np.ndarray  # (P,)
    shape: tuple[int, int] = field(default=(0, 0))

    @property
    def num_pixels(self) -> int:
        return len(self.features)


LIGHT_CODE_DIM = 18


def build_light_embedding(hdri: RadianceMap) -> LightEmbedding:
    dirs = pixel_directions(hdri.rows, hdri.cols).reshape(-1, 3)
    rad = hdri.data.reshape(-1, 3).astype(np.float64)
    sa = pixel_solid_angles(hdri.rows, hdri.cols).reshape(-1)
    return LightEmbedding(np.concatenate([dirs, rad], axis=1), sa, (hdri.rows, hdri.cols))


def _pool(dirs: np.ndarray, rad: np.ndarray, sa: np.ndarray, dim: int) -> np.ndarray:
    lum_w = luminance(rad) * sa
    total = lum_w.sum()
    mean_dir = (dirs * lum_w[:, None]).sum(axis=0) / total if total > 0 else np.zeros(3)
    power = (rad * sa[:, None]).sum(axis=0)
    sh = np.einsum("pk,pc,p->ck", sh_basis_l1(dirs), rad, sa).reshape(-1)
    code = np.concatenate([mean_dir, power, sh])
    out = np.zeros(dim)
    out[:min(dim, len(code))] = code[:dim]
    return out


def pool_light_embedding(emb: LightEmbedding, dim: int = LIGHT_CODE_DIM) -> np.ndarray:
    """Fixed 18-D code: luminance-weighted mean direction, RGB power, degree-1 SH (R,G,B)."""
    return _pool(emb.features[:, :3], emb.features[:, 3:], emb.solid_angles, dim)


def pool_light_set(lights: DirectLightSet, dim: int = LIGHT_CODE_DIM) -> np.ndarray:
    """Same code computed from a sampled direct light set instead of the map."""
    return _pool(lights.directions, lights.radiance, lights.solid_angles, dim)


def light_code(hdri: RadianceMap, rows: int = 100, cols: int = 150, dim: int = LIGHT_CODE_DIM) -> np.ndarray:
    small = downsample_hdri(hdri, min(rows, hdri.rows), min(cols, hdri.cols))
    return pool_light_embedding(build_light_embedding(small), dim)


@dataclass(frozen=True)
class OlatSpec:
    center: np.ndarray
    angular_radius: float
    radiance: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "center", c / np.linalg.norm(c))
        object.__setattr__(self, "radiance", np.broadcast_to(np.asarray(self.radiance, float), (3,)).copy())
        if not 0.0 < self.angular_radius <= np.pi:
            raise ConfigError("OLAT angular radius must be in (0, pi]")
        if np.any(self.radiance < 0):
            raise ConfigError("OLAT radiance must be non-negative")


def generate_olat(spec: OlatSpec, rows: int, cols: int) -> RadianceMap:
    dirs = pixel_directions(rows, cols)
    inside = dirs @ spec.center >= np.cos(spec.angular_radius)
    data = np.where(inside[..., None], spec.radiance, 0.0)
    return RadianceMap(data.astype(np.float32))


def constant_map(value, rows: int = 32, cols: int = 64) -> RadianceMap:
    return RadianceMap(np.broadcast_to(np.asarray(value, np.float32), (rows, cols, 3)).copy())
