"""PSNR and SSIM, with the SSIM adjoint used by the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import ValidationError, check_image, check_same_shape

PSNR_CAP = 100.0
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0


@dataclass
class MetricReport:
    psnr: float
    ssim: float


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all pixels and channels, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(DATA_RANGE**2 / mse))


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, w1: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes of (H, W, C)."""
    k = len(w1)
    rows = sliding_window_view(x, k, axis=0) @ w1  # (H-k+1, W, C)
    return sliding_window_view(rows, k, axis=1) @ w1


def _filter_valid_adjoint(g: np.ndarray, w1: np.ndarray) -> np.ndarray:
    k = len(w1)
    pad = np.pad(g, ((k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    return _filter_valid(pad, w1[::-1])


def _ssim_terms(x, y, w1):
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mx, my = _filter_valid(x, w1), _filter_valid(y, w1)
    sxx = _filter_valid(x * x, w1) - mx * mx
    syy = _filter_valid(y * y, w1) - my * my
    sxy = _filter_valid(x * y, w1) - mx * my
    num1 = 2 * mx * my + c1
    num2 = 2 * sxy + c2
    den1 = mx * mx + my * my + c1
    den2 = sxx + syy + c2
    return mx, my, num1, num2, den1, den2


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-window SSIM for (H, W, C) float images, channels independent."""
    w1 = gaussian_window()
    _, _, num1, num2, den1, den2 = _ssim_terms(x, y, w1)
    return (num1 * num2) / (den1 * den2)


def ssim_value_and_grad(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over valid windows and all channels, and its gradient w.r.t. ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_window(x)
    w1 = gaussian_window()
    mx, my, num1, num2, den1, den2 = _ssim_terms(x, y, w1)
    s = (num1 * num2) / (den1 * den2)
    n = s.size
    # partials of s w.r.t. the local statistics, scaled by d(mean)/ds = 1/n
    d_mx = (2 * my * num2 / (den1 * den2) - 2 * mx * s / den1) / n
    d_sxx = -s / den2 / n
    d_sxy = 2 * num1 / (den1 * den2) / n
    # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
    g_mean = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = (
        _filter_valid_adjoint(g_mean, w1)
        + 2 * x * _filter_valid_adjoint(d_sxx, w1)
        + y * _filter_valid_adjoint(d_sxy, w1)
    )
    return float(s.mean()), grad


def _check_window(x):
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise ValidationError(f"images must be at least {WINDOW}x{WINDOW} for SSIM, got {x.shape[:2]}")


def ssim(a, b) -> float:
    """SSIM of the channel-mean grayscale images (11x11 Gaussian window, sigma 1.5)."""
    a = check_image(np.asarray(a, dtype=np.float64), "a")
    b = check_image(np.asarray(b, dtype=np.float64), "b")
    check_same_shape(a, b)
    _check_window(a)
    ga = a.mean(axis=2, keepdims=True)
    gb = b.mean(axis=2, keepdims=True)
    return float(ssim_map(ga, gb).mean())


def report(a, b) -> MetricReport:
    return MetricReport(psnr=psnr(a, b), ssim=ssim(a, b))
