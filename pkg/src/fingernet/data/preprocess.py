from __future__ import annotations

import numpy as np

from ..errors import DataError
from ..tensor import Tensor
from .transforms import resize


def preprocess_image(image: np.ndarray, target_size: int = 224, channels: int = 1) -> np.ndarray:
    """Resize to target_size^2 (bilinear), replicate to ``channels`` and map [0, 255] to [-1, 1].

    Returns a float32 (channels, target_size, target_size) array.
    """
    if target_size < 8:
        raise ValueError(f"target_size must be at least 8, got {target_size}")
    img = np.asarray(image)
    if img.ndim != 2 or 0 in img.shape:
        raise DataError(f"cannot preprocess degenerate image of shape {img.shape}")
    unit = np.clip(resize(img, target_size, target_size) / 255.0, 0.0, 1.0)
    norm = ((unit - 0.5) / 0.5).astype(np.float32)
    return np.repeat(norm[None], channels, axis=0)


def preprocess(sample, target_size: int = 224, channels: int = 1) -> Tensor:
    return Tensor(preprocess_image(sample.image, target_size, channels))


def batch_array(samples, target_size: int, channels: int) -> np.ndarray:
    return np.stack([preprocess_image(s.image, target_size, channels) for s in samples])
