"""Full-reference image quality on display-encoded images."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, laplace

from lumafield.errors import ConfigError


def display_encode(linear, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    """Exposure scale, clip to [0, 1], then gamma encode."""
    return np.clip(np.asarray(linear, dtype=np.float64) * exposure, 0.0, 1.0) ** (1.0 / gamma)


def to_uint8(linear, exposure: float = 1.0) -> np.ndarray:
    return np.round(display_encode(linear, exposure) * 255.0).astype(np.uint8)


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def blur(x):
        # truncate 3.5 sigma -> radius 5 -> 11 taps
        return gaussian_filter(x, sigma=(sigma, sigma, 0), truncate=3.5, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def sharpness(img) -> float:
    """Variance of the Laplacian of the luminance-ish channel mean."""
    g = np.asarray(img, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=2)
    return float(np.var(laplace(g, mode="reflect")))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    per_view: list = field(default_factory=list)  # (name, psnr, ssim)

    def table(self) -> str:
        rows = ["view\tpsnr\tssim"]
        rows += [f"{n}\t{fmt_db(p)}\t{s:.4f}" for n, p, s in self.per_view]
        rows.append(f"mean\t{fmt_db(self.psnr)}\t{self.ssim:.4f}")
        return "\n".join(rows)


def fmt_db(x: float) -> str:
    return "inf" if np.isinf(x) else f"{x:.2f}"


def compute_metrics(rendered, reference, exposure: float = 1.0, names=None) -> MetricsReport:
    """PSNR/SSIM of linear images after display encoding; accepts one image or a list."""
    single = not isinstance(rendered, (list, tuple))
    rendered = [rendered] if single else list(rendered)
    reference = [reference] if single else list(reference)
    if len(rendered) != len(reference):
        raise ConfigError("rendered and reference lists differ in length")
    names = names or [str(i) for i in range(len(rendered))]
    rows, mses = [], []
    for n, r, t in zip(names, rendered, reference):
        if np.shape(r) != np.shape(t):
            raise ConfigError(f"image shapes differ: {np.shape(r)} vs {np.shape(t)}")
        a, b = display_encode(r, exposure), display_encode(t, exposure)
        mses.append(np.mean((a - b) ** 2))
        rows.append((n, psnr(a, b), ssim(a, b)))
    # overall PSNR pools the per-view MSE
    mse = float(np.mean(mses))
    overall = float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)
    return MetricsReport(overall, float(np.mean([s for *_, s in rows])), rows)
