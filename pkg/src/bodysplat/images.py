"""PNG I/O with a linear-RGB internal representation.

All in-memory images are float64 linear RGB in [0,1]; the sRGB transfer
function is applied only when crossing the PNG boundary.
"""
from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DatasetError


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> 8-bit sRGB."""
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    srgb = np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)
    return np.round(srgb * 255.0).astype(np.uint8)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """8-bit sRGB -> linear [0,1] float64."""
    s = np.asarray(encoded, dtype=np.float64) / 255.0
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def save_png(path, linear_rgb: np.ndarray) -> None:
    arr = srgb_encode(linear_rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError(f"expected (H, W, 3) image for {path}")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DatasetError(f"image file not found: {path}") from None
    except OSError as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    return srgb_decode(arr)
