"""PSNR and SSIM on images in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid (unpadded) window positions."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects a 2-D image, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    w = gaussian_window(window, sigma)

    def filt(x):
        return convolve2d(x, w, mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricResult:
    psnr_db: float
    psnr_std: float
    ssim: float
    ssim_std: float
    per_image: list[tuple[float, float]] = field(default_factory=list)


def evaluate(pred, truth) -> MetricResult:
    """Per-image PSNR/SSIM over a stack ``[N, H, W]`` (or ``[N, 1, H, W]``), then mean/std."""
    pred, truth = _pair(pred, truth)
    if pred.ndim == 4:
        pred, truth = pred[:, 0], truth[:, 0]
    per = [(psnr(p, t), ssim(p, t)) for p, t in zip(pred, truth)]
    ps = np.array([p for p, _ in per])
    ss = np.array([s for _, s in per])
    if np.all(np.isinf(ps)):
        p_mean, p_std = float("inf"), 0.0
    else:
        p_mean, p_std = float(ps.mean()), float(ps.std())
    return MetricResult(p_mean, p_std, float(ss.mean()), float(ss.std()), per)
