"""Image quality metrics: PSNR, SSIM and the geometric-mean average error."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) images, got {a.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in ``[0, 1]``; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, cropped to windows fully inside the image
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM over the valid region of an 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[1]}x{a.shape[0]}")
    g = gaussian_window()
    maps = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    return np.stack(maps, axis=-1)


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def avg_error(psnr_db: float, ssim_value: float, lpips: float | None = None) -> float:
    """Geometric mean of ``10**(-psnr/10)``, ``sqrt(1 - ssim)`` and, if given, LPIPS.

    Without LPIPS this is the two-term mean reported as ``avg_error_2``.
    """
    if ssim_value > 1 + 1e-12:
        raise ValueError(f"ssim must be <= 1, got {ssim_value}")
    if np.isnan(psnr_db):
        raise ValueError("psnr is NaN")
    mse = 0.0 if np.isinf(psnr_db) and psnr_db > 0 else 10.0 ** (-psnr_db / 10.0)
    terms = [mse, np.sqrt(max(0.0, 1.0 - ssim_value))]
    if lpips is not None:
        if lpips < 0:
            raise ValueError(f"lpips must be >= 0, got {lpips}")
        terms.append(lpips)
    if min(terms) == 0.0:
        return 0.0
    return float(np.exp(np.mean(np.log(terms))))
