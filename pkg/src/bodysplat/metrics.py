"""Image fidelity metrics: PSNR and windowed SSIM with an analytic gradient.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, C1=0.01^2,
C2=0.03^2), population covariance, statistics evaluated where the window fits
entirely inside the image, per-channel averaged. That matches the common
reference implementations on their interior region.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_PAD = SSIM_WINDOW // 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) on linear [0,1] images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - _PAD
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Windowed weighted mean over positions where the kernel fits, (H-10, W-10)."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _filter_adjoint(cropped: np.ndarray, full_shape: tuple) -> np.ndarray:
    """Adjoint of _filter_valid (kernel is symmetric)."""
    pad = np.zeros(full_shape)
    pad[_PAD:-_PAD, _PAD:-_PAD] = cropped
    out = correlate1d(pad, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def _ssim_channel(x: np.ndarray, y: np.ndarray, want_grad: bool):
    ux = _filter_valid(x)
    uy = _filter_valid(y)
    uxx = _filter_valid(x * x)
    uyy = _filter_valid(y * y)
    uxy = _filter_valid(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy

    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s_map = (a1 * a2) / (b1 * b2)
    value = float(s_map.mean())
    if not want_grad:
        return value, None

    # d(mean S)/dx via the window statistics; see module docstring derivation
    g = np.full(s_map.shape, 1.0 / s_map.size)
    ds_dux = g * (2.0 * uy * a2 / (b1 * b2) - 2.0 * s_map * ux / b1)
    ds_dvx = g * (-s_map / b2)
    ds_dvxy = g * (2.0 * a1 / (b1 * b2))

    c0 = ds_dux - 2.0 * ds_dvx * ux - ds_dvxy * uy
    grad = _filter_adjoint(c0, x.shape)
    grad += x * _filter_adjoint(2.0 * ds_dvx, x.shape)
    grad += y * _filter_adjoint(ds_dvxy, x.shape)
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Mean SSIM of two images (H, W) or (H, W, C); optionally d(ssim)/da."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidParameterError(f"images must be at least {SSIM_WINDOW}px per side")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    channels = a.shape[2]
    total = 0.0
    grad = np.zeros_like(a) if return_grad else None
    for c in range(channels):
        v, g = _ssim_channel(a[..., c], b[..., c], return_grad)
        total += v
        if return_grad:
            grad[..., c] = g / channels
    value = total / channels
    if return_grad:
        return value, grad.reshape(np.asarray(a).shape) if a.ndim == 3 else grad
    return value
