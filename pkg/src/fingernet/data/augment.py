"""Label-preserving augmentation: flips, random crops and small rotations/shifts."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .dataset import Sample
from .transforms import crop_resize, rotate_translate, to_uint8

TRANSFORMS = ("hflip", "vflip", "random_crop", "small_distortion")


@dataclass
class AugmentationSpec:
    factor: int = 3
    pool: tuple[str, ...] = TRANSFORMS
    crop_fraction_range: tuple[float, float] = (0.90, 1.00)
    rotation_range_deg: tuple[float, float] = (-10.0, 10.0)
    translation_range: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.pool = tuple(self.pool)
        if self.factor < 1:
            raise ConfigError(f"augmentation factor must be >= 1, got {self.factor}")
        if not self.pool:
            raise ConfigError("augmentation pool is empty")
        unknown = set(self.pool) - set(TRANSFORMS)
        if unknown:
            raise ConfigError(f"unknown augmentation transforms {sorted(unknown)}")
        lo, hi = self.crop_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop fractions must satisfy 0 < lo <= hi <= 1, got {self.crop_fraction_range}")
        if self.rotation_range_deg[0] > self.rotation_range_deg[1]:
            raise ConfigError("rotation range is reversed")
        if not 0 <= self.translation_range < 0.5:
            raise ConfigError("translation_range must lie in [0, 0.5)")


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def vflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[::-1, :])


def random_crop(image: np.ndarray, frac_h: float, frac_w: float, top_u: float, left_u: float) -> np.ndarray:
    """Crop a frac_h x frac_w window (offsets as fractions of the slack) and resize back."""
    h, w = image.shape
    ch, cw = frac_h * h, frac_w * w
    return to_uint8(crop_resize(image, top_u * (h - ch), left_u * (w - cw), ch, cw, h, w))


def small_distortion(image: np.ndarray, degrees: float, ty: float, tx: float) -> np.ndarray:
    """Rotate by ``degrees`` and shift by (ty, tx) fractions of the extent, replicating borders."""
    h, w = image.shape
    return to_uint8(rotate_translate(image, degrees, ty * h, tx * w))


def _draw_rng(spec: AugmentationSpec, sample: Sample, draw_index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(sample.key.encode("utf-8")), draw_index])


def augment(sample: Sample, spec: AugmentationSpec, draw_index: int) -> Sample:
    """Return augmented copy number ``draw_index`` of ``sample``; index 0 is the original.

    The transform depends only on (spec.seed, sample key, draw_index).
    """
    if not 0 <= draw_index < spec.factor:
        raise ValueError(f"draw_index {draw_index} outside [0, {spec.factor})")
    if draw_index == 0:
        return sample
    rng = _draw_rng(spec, sample, draw_index)
    kind = spec.pool[int(rng.integers(len(spec.pool)))]
    img = sample.image
    if kind == "hflip":
        out = hflip(img)
    elif kind == "vflip":
        out = vflip(img)
    elif kind == "random_crop":
        lo, hi = spec.crop_fraction_range
        fh, fw = rng.uniform(lo, hi, 2)
        top, left = rng.uniform(0.0, 1.0, 2)
        out = random_crop(img, fh, fw, top, left)
    else:
        deg = rng.uniform(*spec.rotation_range_deg)
        ty, tx = rng.uniform(-spec.translation_range, spec.translation_range, 2)
        out = small_distortion(img, deg, ty, tx)
    return sample.with_image(out)


def expand(samples: list[Sample], spec: AugmentationSpec) -> list[Sample]:
    """Offline expansion: every sample followed by its ``factor - 1`` augmented copies."""
    return [augment(s, spec, k) for s in samples for k in range(spec.factor)]
