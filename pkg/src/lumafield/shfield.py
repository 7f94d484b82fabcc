"""Degree-1 real spherical harmonics for RGB radiance.

Coefficient arrays have shape (..., 3, 4): channel-major, basis order
(Y00, Y1-1, Y1,0, Y1,1) which evaluate to (c0, c1*y, c1*z, c1*x).
Flattened, that is the 12-float R(4) G(4) B(4) wire layout.
"""

from __future__ import annotations

import warnings

import numpy as np

from lumafield.equirect import pixel_directions, pixel_solid_angles

Y00 = 0.5 / np.sqrt(np.pi)  # 0.2820948
Y1 = np.sqrt(3.0 / (4.0 * np.pi))  # 0.4886025

# clamped-cosine convolution weights per band
A_HEMI = np.array([np.pi, 2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
# |cos| over the full sphere: odd bands vanish
A_FULL = np.array([2.0 * np.pi, 0.0, 0.0, 0.0])


def sh_basis_l1(dirs) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        warnings.warn("sh_basis_l1: non-unit direction renormalized", RuntimeWarning, stacklevel=2)
        d = d / np.where(norm > 0, norm, 1.0)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([np.full_like(x, Y00), Y1 * y, Y1 * z, Y1 * x], axis=-1)


def project_to_sh(hdri) -> np.ndarray:
    """Pixel-sum projection sum_p L(p) Y_i(d_p) dOmega_p, shape (3, 4)."""
    data = hdri.data.astype(np.float64)
    rows, cols = data.shape[:2]
    basis = sh_basis_l1(pixel_directions(rows, cols))
    sa = pixel_solid_angles(rows, cols)
    return np.einsum("rck,rcm,rc->km", data, basis, sa)


def as_coeffs(sh) -> np.ndarray:
    """Accept (..., 12) wire layout or (..., 3, 4); return (..., 3, 4) float64."""
    sh = np.asarray(sh, dtype=np.float64)
    return sh.reshape(*sh.shape[:-1], 3, 4) if sh.shape[-1] == 12 else sh


def eval_radiance(sh, dirs) -> np.ndarray:
    """Reconstructed RGB radiance with negative lobes clamped to zero."""
    sh = as_coeffs(sh)
    return np.maximum(0.0, np.einsum("...cm,...m->...c", sh, sh_basis_l1(dirs)))


def irradiance_weights(normals, mode: str = "hemisphere") -> np.ndarray:
    """Per-basis factor A_m * Y_m(n) so that E = sum_m c_m * weight_m (before clamping)."""
    if mode == "hemisphere":
        a = A_HEMI
    elif mode == "full":
        a = A_FULL
    else:
        raise ValueError(f"unknown irradiance mode {mode!r}")
    return sh_basis_l1(normals) * a


def cosine_irradiance(sh, normals, mode: str = "hemisphere") -> np.ndarray:
    """Irradiance E(n) = sum A_l c_lm Y_lm(n), clamped >= 0.

    ``mode="hemisphere"`` is the clamped-cosine convolution (A0 = pi,
    A1 = 2pi/3); ``mode="full"`` integrates |cos| over the whole sphere.
    """
    sh = as_coeffs(sh)
    return np.maximum(0.0, np.einsum("...cm,...m->...c", sh, irradiance_weights(normals, mode)))


def rotate_sh(sh, rotation) -> np.ndarray:
    """Rotate degree-1 coefficients: the band-1 triple transforms as the vector (x, y, z)."""
    out = as_coeffs(sh).copy()
    vec = out[..., [3, 1, 2]]  # (c_x, c_y, c_z)
    rot = vec @ np.asarray(rotation, dtype=np.float64).T
    out[..., 3], out[..., 1], out[..., 2] = rot[..., 0], rot[..., 1], rot[..., 2]
    return out
