"""Synthetic fingerprint-like images for desk-scale experiments.

Each subject gets a master ridge texture: a random orientation field (one
core/delta pair plus a smooth perturbation) is imposed on seeded noise by
repeatedly filtering with a bank of oriented Gabor kernels at the subject's
ridge frequency and squashing the result with tanh. Each image of that
subject is the master under a small rotation, shift and additive noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from ..errors import ConfigError, DataError
from .dataset import Dataset, ingest_dataset
from .netpbm import write_pgm
from .transforms import rotate_translate, to_uint8

N_ORIENTATIONS = 16
GABOR_ITERATIONS = 6


@dataclass
class SynthParams:
    num_subjects: int = 20
    images_per_subject: int = 10
    image_size: int = 64
    ridge_frequency_range: tuple[float, float] = (0.08, 0.12)
    max_rotation_deg: float = 3.0
    max_translation_px: float = 2.0
    max_noise_sigma: float = 8.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_subjects < 1 or self.images_per_subject < 1:
            raise ConfigError("num_subjects and images_per_subject must be positive")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        lo, hi = self.ridge_frequency_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError(f"ridge frequencies must satisfy 0 < lo <= hi < 0.5, got {self.ridge_frequency_range}")
        if not 0 <= self.max_rotation_deg <= 3:
            raise ConfigError("max_rotation_deg must lie in [0, 3]")
        if not 0 <= self.max_translation_px <= 2:
            raise ConfigError("max_translation_px must lie in [0, 2]")
        if not 0 <= self.max_noise_sigma <= 8:
            raise ConfigError("max_noise_sigma must lie in [0, 8]")

    def orientation_seed(self, subject: int) -> int:
        """Per-subject seed; distinct for distinct subjects of one dataset."""
        return self.seed * 1_000_003 + subject


def orientation_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Ridge direction (radians, modulo pi) on a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    z = (xx - size / 2) + 1j * (yy - size / 2)
    core = complex(*rng.uniform(-0.15, 0.15, 2) * size)
    delta = core + complex(rng.uniform(-0.4, 0.4) * size, rng.uniform(0.35, 0.7) * size)
    theta = 0.5 * (np.angle(z - core) - np.angle(z - delta))
    theta += rng.uniform(-np.pi / 2, np.pi / 2)
    for _ in range(2):
        k = rng.uniform(0.5, 1.5, 2) * 2 * np.pi / size
        theta += rng.uniform(0.1, 0.35) * np.sin(k[0] * xx + k[1] * yy + rng.uniform(0, 2 * np.pi))
    return np.mod(theta, np.pi)


def gabor_kernel(theta: float, freq: float) -> np.ndarray:
    """Even Gabor kernel whose carrier runs across ridges of direction ``theta``."""
    sigma = 0.55 / freq
    radius = int(np.ceil(2.5 * sigma))
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1].astype(np.float64)
    normal = x * np.cos(theta + np.pi / 2) + y * np.sin(theta + np.pi / 2)
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma)) * np.cos(2 * np.pi * freq * normal)
    return k - k.mean()


def ridge_texture(theta: np.ndarray, freq: float, rng: np.random.Generator) -> np.ndarray:
    """Values in (-1, 1) following ``theta`` with period 1/freq."""
    img = rng.standard_normal(theta.shape)
    angles = np.arange(N_ORIENTATIONS) * np.pi / N_ORIENTATIONS
    bank = [gabor_kernel(a, freq) for a in angles]
    pos = theta / (np.pi / N_ORIENTATIONS)
    lo = np.floor(pos).astype(int) % N_ORIENTATIONS
    hi = (lo + 1) % N_ORIENTATIONS
    w_hi = pos - np.floor(pos)
    for _ in range(GABOR_ITERATIONS):
        responses = np.stack([fftconvolve(img, k, mode="same") for k in bank])
        picked = (1 - w_hi) * np.take_along_axis(responses, lo[None], 0)[0] + w_hi * np.take_along_axis(
            responses, hi[None], 0
        )[0]
        img = np.tanh(2.0 * picked / (picked.std() + 1e-12))
    return img


def _finger_mask(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    r = ((xx - c) / (0.46 * size)) ** 2 + ((yy - c) / (0.52 * size)) ** 2
    return np.clip((1.15 - r) / 0.3, 0.0, 1.0)


def master_image(params: SynthParams, subject: int) -> np.ndarray:
    """Noise-free gray-level master (float, 0..255) on a canvas with a jitter margin."""
    margin = int(np.ceil(params.max_translation_px)) + 4
    canvas = params.image_size + 2 * margin
    rng = np.random.default_rng(params.orientation_seed(subject))
    theta = orientation_field(rng, canvas)
    freq = rng.uniform(*params.ridge_frequency_range)
    ridges = ridge_texture(theta, freq, rng)
    mask = np.pad(_finger_mask(params.image_size), margin, mode="constant")
    return 255.0 - mask * (110.0 + 90.0 * ridges)


def subject_images(params: SynthParams, subject: int) -> list[np.ndarray]:
    master = master_image(params, subject)
    size = params.image_size
    margin = (master.shape[0] - size) // 2
    rng = np.random.default_rng([params.seed, subject, 1])
    images = []
    for _ in range(params.images_per_subject):
        deg = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
        dy, dx = rng.uniform(-params.max_translation_px, params.max_translation_px, 2)
        sigma = rng.uniform(0.0, params.max_noise_sigma)
        moved = rotate_translate(master, deg, dy, dx)[margin : margin + size, margin : margin + size]
        images.append(to_uint8(moved + sigma * rng.standard_normal(moved.shape)))
    return images


def subject_name(subject: int, count: int) -> str:
    return f"s{subject:0{max(3, len(str(count - 1)))}d}"


def synth_generate(params: SynthParams, out_dir: str | Path) -> Dataset:
    """Write ``<out>/<subject>/<nn>.pgm`` for every subject and image, then ingest it."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for subject in range(params.num_subjects):
            sdir = out / subject_name(subject, params.num_subjects)
            sdir.mkdir(exist_ok=True)
            width = max(2, len(str(params.images_per_subject - 1)))
            for i, img in enumerate(subject_images(params, subject)):
                write_pgm(sdir / f"{i:0{width}d}.pgm", img)
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return ingest_dataset(out)
