"""Image quality metrics used for evaluation."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def _np(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gauss1d(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def to_gray(img: np.ndarray) -> np.ndarray:
    return img[..., :3] @ LUMA if img.ndim == 3 else img


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained windows of the luma images."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    x, y = to_gray(a), to_gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ShapeError(f"image {x.shape} smaller than the {window}x{window} window")
    g = _gauss1d(window, sigma)
    half = window // 2

    def filt(t):
        t = correlate1d(t, g, axis=0, mode="constant")
        t = correlate1d(t, g, axis=1, mode="constant")
        return t[half:t.shape[0] - half, half:t.shape[1] - half]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(m.mean())
