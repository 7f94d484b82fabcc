"""PNG textures in linear RGB, bilinear lookup and tangent-space normal decoding."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import cv2
import numpy as np

from lumafield.errors import AssetError

Colorspace = Literal["linear", "srgb-decoded"]
_PNG_SIG = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True, eq=False)
class TextureMap:
    data: np.ndarray  # (H, W, 3) float32, linear, >= 0
    colorspace: Colorspace = "linear"

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _png_header(path: Path) -> tuple[int, int]:
    head = path.read_bytes()[:33]
    if len(head) < 33 or head[:8] != _PNG_SIG or head[12:16] != b"IHDR":
        raise AssetError(f"{path}: not a PNG file")
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def load_texture(path, colorspace: Colorspace = "linear") -> TextureMap:
    """Read an 8/16-bit RGB(A) PNG into linear floats (alpha dropped)."""
    path = Path(path)
    if not path.is_file():
        raise AssetError(f"texture not found: {path}")
    if colorspace not in ("linear", "srgb-decoded"):
        raise AssetError(f"unknown colorspace tag {colorspace!r}")
    bit_depth, color_type = _png_header(path)
    if bit_depth not in (8, 16):
        raise AssetError(f"{path}: unsupported bit depth {bit_depth}")
    if color_type not in (2, 6):
        raise AssetError(f"{path}: unsupported color type {color_type} (need RGB or RGBA)")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise AssetError(f"{path}: PNG decode failure")
    scale = 255.0 if bit_depth == 8 else 65535.0
    rgb = raw[..., 2::-1].astype(np.float64) / scale
    if colorspace == "srgb-decoded":
        rgb = srgb_to_linear(rgb)
    return TextureMap(np.ascontiguousarray(rgb, dtype=np.float32), colorspace)


def save_texture(path, rgb: np.ndarray, bit_depth: int = 8, srgb: bool = False) -> None:
    """Write values in [0, 1] as an RGB PNG (optionally sRGB-encoding linear input)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if srgb:
        rgb = linear_to_srgb(rgb)
    top = 255 if bit_depth == 8 else 65535
    q = np.round(np.clip(rgb, 0.0, 1.0) * top).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q[..., ::-1])):
        raise AssetError(f"cannot write {path}")


def sample_texture(tex: TextureMap, uv) -> np.ndarray:
    """Bilinear lookup with edge clamping; uv (0,0) is the bottom-left corner."""
    uv = np.asarray(uv, dtype=np.float64)
    h, w = tex.data.shape[:2]
    x = np.clip(uv[..., 0] * w - 0.5, 0.0, w - 1)
    y = np.clip((1.0 - uv[..., 1]) * h - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    d = tex.data
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def decode_normal(rgb, tbn, eps: float = 1e-2) -> np.ndarray:
    """Tangent-space normal texel -> world unit normal; falls back to the frame normal.

    A unit normal decodes to length ~1, so anything shorter than ``eps`` (such as an
    8-bit mid-grey texel) is treated as empty.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    tbn = np.asarray(tbn, dtype=np.float64)
    n_t = 2.0 * rgb - 1.0
    length = np.linalg.norm(n_t, axis=-1, keepdims=True)
    n_t = n_t / np.where(length > eps, length, 1.0)
    world = np.einsum("...ij,...j->...i", tbn, n_t)
    world = world / np.maximum(np.linalg.norm(world, axis=-1, keepdims=True), 1e-300)
    return np.where(length > eps, world, tbn[..., :, 2])
