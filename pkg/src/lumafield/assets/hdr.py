"""Radiance RGBE (.hdr) environment maps, ``-Y rows +X cols`` orientation only."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lumafield.errors import AssetError

_MAGICS = (b"#?RADIANCE", b"#?RGBE")
_RES = re.compile(rb"^-Y (\d+) \+X (\d+)$")


@dataclass(frozen=True, eq=False)
class RadianceMap:
    """Equirectangular linear RGB radiance; row 0 is the +Y pole, column 0 is phi = 0."""

    data: np.ndarray  # (rows, cols, 3) float32

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    rgbe = np.asarray(rgbe, dtype=np.uint8)
    e = rgbe[..., 3:4].astype(np.int32)
    scale = np.where(e > 0, np.ldexp(1.0, e - 128 - 8), 0.0)
    return (rgbe[..., :3].astype(np.float64) * scale).astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, None)
    peak = rgb.max(axis=-1)
    mant, exp = np.frexp(peak)  # peak = mant * 2**exp, mant in [0.5, 1)
    # round to nearest, carrying into the exponent when the mantissa saturates
    q = np.round(rgb * (np.ldexp(1.0, 8 - exp))[..., None])
    carry = q.max(axis=-1) > 255
    exp = exp + carry
    q = np.where(carry[..., None], np.round(rgb * np.ldexp(1.0, 8 - exp)[..., None]), q)
    out = np.zeros(rgb.shape[:-1] + (4,), np.uint8)
    ok = (peak > 1e-32) & (exp + 128 > 0)
    out[..., :3] = np.where(ok[..., None], np.clip(q, 0, 255), 0).astype(np.uint8)
    out[..., 3] = np.where(ok, np.clip(exp + 128, 0, 255), 0).astype(np.uint8)
    return out


def _read_rle_scanline(buf: memoryview, pos: int, width: int) -> tuple[np.ndarray, int]:
    line = np.empty((4, width), np.uint8)
    for c in range(4):
        i = 0
        while i < width:
            if pos >= len(buf):
                raise AssetError("truncated scanline")
            code = buf[pos]
            pos += 1
            if code > 128:
                run = code - 128
                if pos >= len(buf) or i + run > width:
                    raise AssetError("truncated scanline" if pos >= len(buf) else "bad run length")
                line[c, i:i + run] = buf[pos]
                pos += 1
            else:
                run = code
                if run == 0 or i + run > width:
                    raise AssetError("bad run length")
                if pos + run > len(buf):
                    raise AssetError("truncated scanline")
                line[c, i:i + run] = np.frombuffer(buf[pos:pos + run], np.uint8)
                pos += run
            i += run
    return line.T, pos


def load_hdri(path) -> RadianceMap:
    path = Path(path)
    if not path.is_file():
        raise AssetError(f"hdri not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(_MAGICS):
        raise AssetError(f"{path}: bad magic (not a Radiance .hdr)")
    pos = 0
    while True:
        end = blob.find(b"\n", pos)
        if end < 0:
            raise AssetError(f"{path}: truncated header")
        line = blob[pos:end].strip()
        pos = end + 1
        if line.startswith(b"FORMAT=") and line != b"FORMAT=32-bit_rle_rgbe":
            raise AssetError(f"{path}: unsupported {line.decode(errors='replace')}")
        if line == b"":
            break
    end = blob.find(b"\n", pos)
    m = _RES.match(blob[pos:end if end >= 0 else len(blob)].strip())
    if m is None:
        raise AssetError(f"{path}: unsupported resolution line (need '-Y H +X W')")
    rows, cols = int(m.group(1)), int(m.group(2))
    pos = end + 1
    buf = memoryview(blob)
    out = np.empty((rows, cols, 4), np.uint8)
    try:
        for r in range(rows):
            new_rle = (8 <= cols < 32768 and pos + 4 <= len(blob) and blob[pos] == 2 and blob[pos + 1] == 2
                       and (blob[pos + 2] & 0x80) == 0)
            if new_rle:
                if (blob[pos + 2] << 8 | blob[pos + 3]) != cols:
                    raise AssetError("scanline width mismatch")
                out[r], pos = _read_rle_scanline(buf, pos + 4, cols)
            else:
                if pos + 4 * cols > len(blob):
                    raise AssetError("truncated scanline")
                out[r] = np.frombuffer(buf[pos:pos + 4 * cols], np.uint8).reshape(cols, 4)
                pos += 4 * cols
    except AssetError as exc:
        raise AssetError(f"{path}: {exc} (row {r})") from None
    return RadianceMap(rgbe_to_float(out))


def save_hdri(path, hdri: RadianceMap | np.ndarray) -> None:
    """Write flat (uncompressed) RGBE scanlines."""
    data = hdri.data if isinstance(hdri, RadianceMap) else np.asarray(hdri)
    rows, cols = data.shape[:2]
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {rows} +X {cols}\n".encode()
    Path(path).write_bytes(header + float_to_rgbe(data).tobytes())
