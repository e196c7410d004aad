"""Occlusion sensitivity: slide a zeroed N x N square over the raw image and re-classify."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.dataset import Sample
from .data.netpbm import write_pgm
from .data.preprocess import preprocess_image
from .errors import ConfigError, DataError
from .model import Model
from .trainer import predict_logits


@dataclass
class SaliencyConfig:
    window_n: int
    stride_s: int
    fill: int = 0

    def __post_init__(self) -> None:
        if self.window_n < 1:
            raise ConfigError("window_n must be >= 1")
        if self.stride_s < 1:
            raise ConfigError("stride_s must be >= 1")

    @classmethod
    def default_for(cls, image_size: int) -> "SaliencyConfig":
        n = max(1, image_size // 8)
        return cls(window_n=n, stride_s=max(1, n // 2))


@dataclass(frozen=True)
class WindowRecord:
    x: int
    y: int
    predicted_class: int
    true_class_prob: float
    flipped: bool


@dataclass
class SaliencyMap:
    windows: list[WindowRecord]
    grid_shape: tuple[int, int]
    pixel_map: np.ndarray
    coverage: np.ndarray
    confidence_map: np.ndarray
    true_class: int
    baseline_class: int
    baseline_prob: float

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0

    def grid(self, attr: str = "flipped") -> np.ndarray:
        gh, gw = self.grid_shape
        return np.array([getattr(w, attr) for w in self.windows]).reshape(gh, gw)


def grid_shape(height: int, width: int, n: int, s: int) -> tuple[int, int]:
    return (height - n) // s + 1, (width - n) // s + 1


def occlude(image: np.ndarray, x: int, y: int, n: int, fill: int = 0) -> np.ndarray:
    """Copy of ``image`` with the n x n square whose top-left corner is (x, y) set to ``fill``."""
    h, w = image.shape[:2]
    if n < 1 or x < 0 or y < 0 or x + n > w or y + n > h:
        raise ValueError(f"occlusion square {n}x{n} at (x={x}, y={y}) leaves the {w}x{h} image")
    out = np.array(image, copy=True)
    out[y : y + n, x : x + n] = fill
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify_images(model: Model, images: Sequence[np.ndarray], batch_size: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predicted classes and class probabilities for raw images."""
    size, channels = model.config.input_size, model.config.input_channels
    preds, probs = [], []
    for start in range(0, len(images), batch_size):
        x = np.stack([preprocess_image(img, size, channels) for img in images[start : start + batch_size]])
        p = _softmax(predict_logits(model, x))
        preds.append(p.argmax(axis=1))
        probs.append(p)
    return np.concatenate(preds), np.concatenate(probs)


def occlusion_sweep(
    model: Model,
    sample: Sample,
    config: SaliencyConfig,
    batch_size: int = 1,
    order: Sequence[int] | None = None,
) -> SaliencyMap:
    """Classify the image once per window position and aggregate per-pixel importance.

    A window "flips" when the occluded prediction differs from the sample's
    subject_id.
    Each pixel's importance is the fraction of covering windows that flip;
    pixels no window reaches get 0 and ``coverage == 0``. ``order`` permutes the
    evaluation order of the windows (results are stored in raster order).
    """
    image = np.asarray(sample.image)
    true_class = int(sample.subject_id)
    if image.ndim != 2:
        raise DataError(f"expected a 2-d grayscale image, got shape {image.shape}")
    h, w = image.shape
    n, s = config.window_n, config.stride_s
    if n > min(h, w):
        raise ConfigError(f"window {n}x{n} is larger than the {w}x{h} image")
    if not 0 <= true_class < model.config.num_classes:
        raise ConfigError(f"label {true_class} outside the model's {model.config.num_classes} classes")
    gh, gw = grid_shape(h, w, n, s)
    positions = [(gy * s, gx * s) for gy in range(gh) for gx in range(gw)]

    base_pred, base_probs = classify_images(model, [image])
    baseline_prob = float(base_probs[0, true_class])

    idx = list(range(len(positions))) if order is None else [int(i) for i in order]
    if sorted(idx) != list(range(len(positions))):
        raise ValueError("order must be a permutation of the window indices")
    occluded = [occlude(image, positions[i][1], positions[i][0], n, config.fill) for i in idx]
    preds, probs = classify_images(model, occluded, batch_size)
    records: list[WindowRecord | None] = [None] * len(positions)
    for i, pred, prob in zip(idx, preds, probs):
        y, x = positions[i]
        records[i] = WindowRecord(x, y, int(pred), float(prob[true_class]), bool(pred != true_class))

    flips = np.zeros((h, w))
    drops = np.zeros((h, w))
    coverage = np.zeros((h, w), dtype=np.int64)
    for r in records:
        flips[r.y : r.y + n, r.x : r.x + n] += r.flipped
        drops[r.y : r.y + n, r.x : r.x + n] += max(baseline_prob - r.true_class_prob, 0.0)
        coverage[r.y : r.y + n, r.x : r.x + n] += 1
    covered = coverage > 0
    pixel_map = np.zeros((h, w))
    pixel_map[covered] = flips[covered] / coverage[covered]
    confidence = np.zeros((h, w))
    confidence[covered] = drops[covered] / coverage[covered]
    peak = confidence.max()
    if peak > 0:
        confidence /= peak
    return SaliencyMap(
        windows=records,
        grid_shape=(gh, gw),
        pixel_map=pixel_map,
        coverage=coverage,
        confidence_map=confidence,
        true_class=true_class,
        baseline_class=int(base_pred[0]),
        baseline_prob=baseline_prob,
    )


def render_map(smap: SaliencyMap, out_prefix: str | Path) -> list[Path]:
    """Write ``<prefix>saliency.pgm``, ``<prefix>confidence.pgm`` (plain P2) and ``<prefix>windows.csv``."""
    prefix = str(out_prefix)
    paths = [Path(prefix + "saliency.pgm"), Path(prefix + "confidence.pgm"), Path(prefix + "windows.csv")]
    try:
        write_pgm(paths[0], np.rint(255 * smap.pixel_map), plain=True)
        write_pgm(paths[1], np.rint(255 * smap.confidence_map), plain=True)
        with open(paths[2], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "predicted_class", "true_class_prob", "flipped"])
            for r in smap.windows:
                w.writerow([r.x, r.y, r.predicted_class, repr(r.true_class_prob), int(r.flipped)])
    except OSError as exc:
        raise DataError(f"cannot write saliency outputs under {prefix!r}: {exc}") from exc
    return paths
