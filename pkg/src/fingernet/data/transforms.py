"""Bilinear resampling helpers shared by augmentation and preprocessing.

Pixel centres sit at integer coordinates; sampling outside the image
replicates the border.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates


def sample_bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return map_coordinates(img, [rows, cols], order=1, mode="nearest")


def crop_resize(
    image: np.ndarray,
    top: float,
    left: float,
    height: float,
    width: float,
    out_h: int,
    out_w: int,
) -> np.ndarray:
    """Resample the window [top, top+height) x [left, left+width) onto an out_h x out_w grid."""
    ys = top + (np.arange(out_h) + 0.5) * (height / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (width / out_w) - 0.5
    rows, cols = np.meshgrid(ys, xs, indexing="ij")
    return sample_bilinear(image, rows, cols)


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return np.asarray(image, dtype=np.float64)
    return crop_resize(image, 0.0, 0.0, h, w, out_h, out_w)


def rotate_translate(image: np.ndarray, degrees: float, dy: float, dx: float) -> np.ndarray:
    """Rotate about the image centre, then shift by (dy, dx) pixels."""
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source location
    y0 = yy - dy - cy
    x0 = xx - dx - cx
    rows = c * y0 + s * x0 + cy
    cols = -s * y0 + c * x0 + cx
    return sample_bilinear(image, rows, cols)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)
