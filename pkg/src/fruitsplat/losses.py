"""Photometric and mask losses, each with a gradient w.r.t. the prediction."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

BCE_EPS = 1e-6


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {gt.shape}")


def l1_loss(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_shapes(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def l1_loss_grad(pred, gt) -> tuple[float, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_shapes(pred, gt)
    diff = pred - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size % 2 != 1:
        raise ValueError(f"SSIM window must be odd, got {size}")
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # zero padding, same-size output; the kernel is symmetric so this
    # operator is its own adjoint
    out = correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def ssim_map(pred, gt, window: int = 11, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2,
             sigma: float = 1.5) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_shapes(pred, gt)
    return _ssim_terms(pred, gt, gaussian_window(window, sigma), c1, c2)[0]


def _ssim_terms(x, y, k, c1, c2):
    mu_x, mu_y = _blur(x, k), _blur(y, k)
    sxx = _blur(x * x, k) - mu_x * mu_x
    syy = _blur(y * y, k) - mu_y * mu_y
    sxy = _blur(x * y, k) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * sxy + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = sxx + syy + c2
    s = a1 * a2 / (b1 * b2)
    return s, mu_x, mu_y, a1, a2, b1, b2


def dssim_loss(pred, gt, window: int = 11, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """(1 - mean SSIM) / 2 with an 11x11, sigma 1.5 Gaussian window."""
    return float((1.0 - ssim_map(pred, gt, window, c1, c2).mean()) / 2.0)


def dssim_loss_grad(pred, gt, window: int = 11, c1: float = 0.01 ** 2,
                    c2: float = 0.03 ** 2) -> tuple[float, np.ndarray]:
    x, y = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_shapes(x, y)
    k = gaussian_window(window)
    s, mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y, k, c1, c2)
    g = -0.5 / s.size  # d loss / d ssim_map
    denom = b1 * b2
    # SSIM as a function of (mu_x, E[x^2], E[xy]) with the target fixed
    d_mu = g * ((2.0 * mu_y * a2 - 2.0 * mu_y * a1) / denom - s * (2.0 * mu_x / b1 - 2.0 * mu_x / b2))
    d_xx = g * (-s / b2)
    d_xy = g * (2.0 * a1 / denom)
    grad = _blur(d_mu, k) + 2.0 * x * _blur(d_xx, k) + y * _blur(d_xy, k)
    return float((1.0 - s.mean()) / 2.0), grad


def bce_loss(pred, mask, valid: bool = True) -> float:
    return bce_loss_grad(pred, mask, valid)[0]


def bce_loss_grad(pred, mask, valid: bool = True) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy of a probability image against a 0/1 mask.

    Predictions are clamped to [1e-6, 1 - 1e-6]; the clamp blocks the
    gradient. A frame without this mask (``valid=False``) contributes 0.
    """
    pred = np.asarray(pred, dtype=float)
    if not valid:
        return 0.0, np.zeros_like(pred)
    y = np.asarray(mask, dtype=float)
    _check_shapes(pred, y)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    inside = (pred > BCE_EPS) & (pred < 1.0 - BCE_EPS)
    grad = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / p.size
    return float(loss.mean()), grad
