"""Host photometric loss (L1 + D-SSIM) and evaluation metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2,
per channel, with valid cropping (no padding) so the gradient has no
boundary-convention ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import ssim_image
from .errors import ShapeMismatch
from .scene import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 99.0
DEFAULT_W_SSIM = 0.2


def _window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-((np.arange(SSIM_WINDOW) - half) ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


_W = _window()


def _check_pair(rendered: ImageBuffer, target: ImageBuffer) -> None:
    if rendered.pixels.shape != target.pixels.shape:
        raise ShapeMismatch(
            f"image shapes differ: {rendered.pixels.shape} vs {target.pixels.shape}")


@dataclass
class LossBreakdown:
    l1: float
    dssim: float
    total: float
    grad_image: np.ndarray  # d total / d rendered, (H, W, 3)


def _ssim_with_grad(rendered: np.ndarray, target: np.ndarray, upstream: float):
    """Mean SSIM over channels and valid windows, plus upstream * d ssim/d rendered."""
    h, w, _ = rendered.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeMismatch(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {h}x{w}")
    total, count, grad = ssim_image(np.ascontiguousarray(rendered),
                                    np.ascontiguousarray(target),
                                    _W, SSIM_C1, SSIM_C2, upstream)
    return total / count, grad


def ssim(rendered: ImageBuffer, target: ImageBuffer) -> float:
    """Mean SSIM (1.0 for identical images)."""
    _check_pair(rendered, target)
    val, _ = _ssim_with_grad(rendered.pixels, target.pixels, 0.0)
    return float(val)


def loss_LA(rendered: ImageBuffer, target: ImageBuffer,
            w_ssim: float = DEFAULT_W_SSIM) -> LossBreakdown:
    """total = (1 - w_ssim) * L1 + w_ssim * D-SSIM, with d total / d rendered."""
    _check_pair(rendered, target)
    if not 0.0 <= w_ssim <= 1.0:
        raise ValueError(f"w_ssim must be in [0, 1], got {w_ssim}")
    r, t = rendered.pixels, target.pixels
    diff = r - t
    l1 = float(np.mean(np.abs(diff)))
    grad_l1 = np.sign(diff) / diff.size

    # d dssim / d ssim = -1/2
    ssim_val, grad_ssim_scaled = _ssim_with_grad(r, t, w_ssim * (-0.5))
    dssim = (1.0 - ssim_val) / 2.0

    total = (1.0 - w_ssim) * l1 + w_ssim * dssim
    grad = (1.0 - w_ssim) * grad_l1 + grad_ssim_scaled
    return LossBreakdown(l1=l1, dssim=float(dssim), total=float(total), grad_image=grad)


def psnr(rendered: ImageBuffer, target: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB (peak 1.0), capped at the 99 dB sentinel."""
    _check_pair(rendered, target)
    mse = float(np.mean((rendered.pixels - target.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse), PSNR_CAP_DB))
