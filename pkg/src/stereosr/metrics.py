"""Image quality metrics on [0, 1] tensors."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range.

    Identical inputs (and anything below the corresponding MSE floor) report
    the documented 100 dB cap so output stays finite and parseable.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean(np.square(a.data.astype(np.float64) - b.data.astype(np.float64))))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-np.square(coords) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def _windowed_mean(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    # valid-mode weighted local mean over the trailing two axes
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nchwkl,kl->nchw", win, window, optimize=True)


def ssim(a: Tensor, b: Tensor) -> float:
    """Single-scale structural similarity, 11x11 Gaussian window (sigma 1.5),
    averaged over channels and valid window positions.  Dynamic range 1."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.h < SSIM_WINDOW or a.w < SSIM_WINDOW:
        raise ShapeError(
            f"image {a.h}x{a.w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    window = gaussian_window()
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)
    mu_x = _windowed_mean(x, window)
    mu_y = _windowed_mean(y, window)
    sigma_x = _windowed_mean(x * x, window) - mu_x * mu_x
    sigma_y = _windowed_mean(y * y, window) - mu_y * mu_y
    sigma_xy = _windowed_mean(x * y, window) - mu_x * mu_y
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    score = ((2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return float(score.mean())
