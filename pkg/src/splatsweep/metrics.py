"""Image quality metrics: PSNR, SSIM (with its exact gradient) and mask IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class ViewMetrics:
    psnr: float
    ssim: float
    mask_iou: float


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering over the two spatial axes; the window is
    # symmetric so this operator is its own adjoint
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _ssim_terms(np.asarray(a, np.float64), np.asarray(b, np.float64))[0]


def _ssim_terms(a, b):
    win = gaussian_window()
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    saa = _blur(a * a, win) - mu_a**2
    sbb = _blur(b * b, win) - mu_b**2
    sab = _blur(a * b, win) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + SSIM_C1
    num2 = 2 * sab + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = saa + sbb + SSIM_C2
    s = num1 * num2 / (den1 * den2)
    return s, (win, mu_a, mu_b, num1, num2, den1, den2)


def ssim(a, b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return float(ssim_map(a, b).mean())


def ssim_and_grad(a, b) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    s, (win, mu_a, mu_b, num1, num2, den1, den2) = _ssim_terms(a, b)
    den = den1 * den2
    # partials of the per-pixel map w.r.t. the blurred statistics of ``a``
    d_mu = (2 * mu_b * num2 - 2 * mu_b * num1) / den - s * (2 * mu_a / den1 - 2 * mu_a / den2)
    d_aa = -s / den2
    d_ab = 2 * num1 / den
    # sigma terms are E[.] minus products of means; fold the mean parts into d_mu
    n = s.size
    grad = _blur(d_mu, win) + 2 * a * _blur(d_aa, win) + b * _blur(d_ab, win)
    return float(s.mean()), grad / n


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` if identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def view_metrics(rgb, target_rgb, alpha, target_alpha, mask_threshold: float = 0.5) -> ViewMetrics:
    return ViewMetrics(
        psnr(rgb, target_rgb),
        ssim(rgb, target_rgb),
        mask_iou(np.asarray(alpha) > mask_threshold, np.asarray(target_alpha) > mask_threshold),
    )
