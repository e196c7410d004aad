"""Directory-per-subject datasets and the per-subject test/validation/train split."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import DataError
from .netpbm import read_image

IMAGE_SUFFIXES = (".pgm", ".ppm")
TEST_PER_SUBJECT = 4
PARTS = ("train", "val", "test")


@dataclass
class Sample:
    subject_id: int
    image: np.ndarray
    source_path: str = ""
    is_augmented: bool = False
    subject_name: str = ""
    image_name: str = ""

    @property
    def key(self) -> str:
        """Stable identifier used to seed per-sample randomness."""
        return f"{self.subject_name}/{self.image_name}"

    def with_image(self, image: np.ndarray, augmented: bool = True) -> "Sample":
        return replace(self, image=image, is_augmented=augmented)


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def by_subject(self) -> dict[str, list[Sample]]:
        groups: dict[str, list[Sample]] = {name: [] for name in self.class_names}
        for s in self.samples:
            groups.setdefault(s.subject_name, []).append(s)
        return groups


def ingest_dataset(root_dir: str | Path) -> Dataset:
    """Load ``<root>/<subject>/<image>.pgm|ppm``.

    Subjects are sorted by name and numbered 0..K-1; images are sorted within a
    subject. Pixmaps are converted to grayscale.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    subjects = sorted(p for p in root.iterdir() if p.is_dir())
    if not subjects:
        raise DataError(f"dataset root {root} contains no subject directories")
    samples: list[Sample] = []
    for label, subject in enumerate(subjects):
        files = sorted(p for p in subject.iterdir() if p.is_file())
        if not files:
            raise DataError(f"subject {subject.name} has no images")
        for path in files:
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                raise DataError(f"unsupported image file {path} (expected .pgm or .ppm)")
            samples.append(
                Sample(
                    subject_id=label,
                    image=read_image(path),
                    source_path=str(path),
                    subject_name=subject.name,
                    image_name=path.name,
                )
            )
    return Dataset(samples, [s.name for s in subjects])


@dataclass
class SplitPlan:
    """Per-subject image names assigned to train / val / test."""

    seed: int
    val_per_subject: int
    parts: dict[str, dict[str, list[str]]] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {part: sum(len(p[part]) for p in self.parts.values()) for part in PARTS}

    def select(self, dataset: Dataset, part: str) -> list[Sample]:
        if part not in PARTS:
            raise ValueError(f"unknown split part {part!r}")
        wanted = {(subj, name) for subj, p in self.parts.items() for name in p[part]}
        chosen = [s for s in dataset.samples if (s.subject_name, s.image_name) in wanted]
        if len(chosen) != len(wanted):
            raise DataError(f"split plan references {len(wanted) - len(chosen)} images missing from the dataset")
        return chosen

    def to_text(self) -> str:
        lines = []
        for subject in sorted(self.parts):
            rows = [(name, part) for part in PARTS for name in self.parts[subject][part]]
            for name, part in sorted(rows):
                lines.append(f"{subject}\t{name}\t{part}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read split file {path}: {exc}") from exc
        parts: dict[str, dict[str, list[str]]] = {}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or fields[2] not in PARTS:
                raise DataError(f"{path}:{n}: expected 'subject<TAB>image<TAB>train|val|test'")
            subject, name, part = fields
            parts.setdefault(subject, {p: [] for p in PARTS})[part].append(name)
        if not parts:
            raise DataError(f"split file {path} is empty")
        vals = {len(p["val"]) for p in parts.values()}
        return cls(seed=-1, val_per_subject=vals.pop() if len(vals) == 1 else -1, parts=parts)


def _subject_rng(seed: int, subject: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(subject.encode("utf-8"))])


def split(dataset: Dataset, seed: int, val_per_subject: int = 1) -> SplitPlan:
    """Per subject: 4 random test images, ``val_per_subject`` validation, the rest train.

    The plan depends only on the sorted image listing and ``seed``.
    """
    if val_per_subject < 0:
        raise ValueError("val_per_subject must be non-negative")
    need = TEST_PER_SUBJECT + val_per_subject + 1
    plan = SplitPlan(seed=seed, val_per_subject=val_per_subject)
    for subject, samples in sorted(dataset.by_subject().items()):
        names = sorted(s.image_name for s in samples)
        if len(names) < need:
            raise DataError(f"subject {subject} has {len(names)} images; the split needs at least {need}")
        order = _subject_rng(seed, subject).permutation(len(names))
        picked = [names[i] for i in order]
        plan.parts[subject] = {
            "test": sorted(picked[:TEST_PER_SUBJECT]),
            "val": sorted(picked[TEST_PER_SUBJECT : TEST_PER_SUBJECT + val_per_subject]),
            "train": sorted(picked[TEST_PER_SUBJECT + val_per_subject :]),
        }
    return plan
