"""Shading error metrics: per-point MSE, image MSE, DSSIM, tone mapping.

Image metrics run on tone-mapped values and cover only pixels the geometry
actually touches; background conventions would otherwise dominate the
scores.  Tone mapping scales the linear image so the 0.9 luminance
percentile maps to 1, then applies a 1.6 gamma curve.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .images import Image

GAMMA = 1.6
PERCENTILE = 90.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window


def mse_3d(predicted, reference) -> float:
    """Mean squared error over per-point shading values."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {reference.shape}")
    return float(np.mean((predicted - reference) ** 2))


def _common_mask(a: Image, b: Image) -> np.ndarray:
    if a.values.shape != b.values.shape:
        raise ValueError(f"image dimensions differ: {a.values.shape} vs {b.values.shape}")
    return a.mask & b.mask


def mse_2d(a: Image, b: Image) -> float:
    """Mean squared per-channel difference over covered pixels."""
    mask = _common_mask(a, b)
    if not np.any(mask):
        raise ValueError("images have no covered pixels in common")
    d = a.values[mask].astype(np.float64) - b.values[mask].astype(np.float64)
    return float(np.mean(d * d))


def _to_gray(img: Image) -> np.ndarray:
    return img.luminance().astype(np.float64)


def ssim_map(a: Image, b: Image, dynamic_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    if a.values.shape[:2] != b.values.shape[:2]:
        raise ValueError(f"image dimensions differ: {a.values.shape} vs {b.values.shape}")
    x, y = _to_gray(a), _to_gray(b)
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2

    def blur(v):
        return gaussian_filter(v, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="nearest")

    mu_x, mu_y = blur(x), blur(y)
    xx, yy, xy = blur(x * x), blur(y * y), blur(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))


def dssim(a: Image, b: Image, dynamic_range: float = 1.0) -> float:
    """(1 - mean SSIM) / 2 over covered pixels; symmetric, 0 for identical."""
    mask = _common_mask(a, b)
    if not np.any(mask):
        raise ValueError("images have no covered pixels in common")
    s = ssim_map(a, b, dynamic_range=dynamic_range)
    return float((1.0 - np.mean(s[mask])) / 2.0)


def tonemap(img: Image, scale: float | None = None) -> Image:
    """Exposure-normalize to the 90th luminance percentile, then gamma 1.6.

    Scaling the input by any positive constant leaves the output unchanged.
    Pass ``scale`` to reuse another image's exposure (comparisons tone-map
    both sides with the reference's scale).
    """
    if not np.any(img.mask):
        raise ValueError("cannot tone-map an image with no covered pixels")
    if scale is None:
        lum = img.luminance()[img.mask]
        ref = float(np.percentile(lum, PERCENTILE))
        scale = 1.0 / max(ref, 1e-6)
    out = np.clip(img.values * scale, 0.0, 1.0) ** (1.0 / GAMMA)
    return Image(values=out.astype(np.float32), mask=img.mask.copy())
