"""Flat ``key=value`` run configuration shared by the CLI commands.

Every key has a default (``DEFAULTS``). Values of ``auto`` are resolved from
the variant or the data. Unknown keys are rejected.
"""

from __future__ import annotations

import json
from pathlib import Path

from .data.augment import AugmentationSpec
from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .saliency import SaliencyConfig
from .trainer import TrainConfig

# key -> (default, help)
DEFAULTS: dict[str, tuple[str, str]] = {
    "variant": ("resnet50", "resnet50 | resnet18 | resnet_mini (desk-scale profile)"),
    "input_channels": ("1", "image planes fed to the network (a loaded checkpoint wins)"),
    "input_size": ("auto", "network input side; auto = 224, or 64 for resnet_mini"),
    "num_classes": ("auto", "head width; auto = number of subjects in the data"),
    "stage_widths": ("auto", "comma-separated channel counts per stage"),
    "blocks_per_stage": ("auto", "comma-separated block counts per stage"),
    "init_seed": ("0", "seed for weight initialisation and head replacement"),
    "epochs": ("100", "training epochs"),
    "batch_size": ("24", "mini-batch size"),
    "learning_rate": ("0.0001", "optimizer step size"),
    "lambda1": ("0.0001", "weight of the squared Frobenius norm of the head"),
    "optimizer": ("adam", "adam | sgd"),
    "adam_beta1": ("0.9", "Adam first-moment decay"),
    "adam_beta2": ("0.999", "Adam second-moment decay"),
    "adam_eps": ("1e-08", "Adam denominator epsilon"),
    "sgd_momentum": ("0.0", "SGD momentum"),
    "seed": ("0", "shuffling seed"),
    "bn_freeze": ("false", "keep batch-norm running statistics fixed while training"),
    "trainable": ("all", "all | head_only | stages_from(k)"),
    "aug_factor": ("3", "training-set multiplier (1 disables augmentation)"),
    "aug_pool": ("hflip,vflip,random_crop,small_distortion", "transforms to sample from"),
    "aug_mode": ("online", "online (fresh draws every epoch) | offline (fixed expansion)"),
    "aug_seed": ("0", "augmentation seed"),
    "crop_fraction_min": ("0.9", "smallest random-crop side fraction"),
    "crop_fraction_max": ("1.0", "largest random-crop side fraction"),
    "rotation_deg": ("10", "max absolute distortion rotation in degrees"),
    "translation": ("0.05", "max absolute distortion shift as a fraction of the side"),
    "split_seed": ("0", "seed of the per-subject split (when split_file is empty)"),
    "val_per_subject": ("1", "validation images held out per subject"),
    "saliency_window": ("auto", "occlusion square side; auto = image side / 8"),
    "saliency_stride": ("auto", "occlusion stride; auto = window / 2"),
    "data_root": ("", "dataset directory <root>/<subject>/<image>.pgm|ppm"),
    "split_file": ("", "split plan file; empty = compute one and store it in report_dir"),
    "checkpoint_in": ("", "FPNT checkpoint to fine-tune from (head replaced if widths differ)"),
    "checkpoint_out": ("", "where to write the best checkpoint; empty = report_dir/best.fpnt"),
    "report_dir": ("report", "output directory"),
}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


class RunConfig:
    """Resolved key/value view with typed accessors."""

    def __init__(self, values: dict[str, str] | None = None) -> None:
        unknown = set(values or {}) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        self.values = {k: d for k, (d, _) in DEFAULTS.items()}
        self.values.update(values or {})
        if self.values["variant"] not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.values["input_size"] == "auto":
            self.values["input_size"] = "64" if self.values["variant"] == "resnet_mini" else "224"

    def __getitem__(self, key: str) -> str:
        return self.values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)

    def int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from exc

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from exc

    def bool(self, key: str) -> bool:
        try:
            return _BOOL[self.values[key].lower()]
        except KeyError as exc:
            raise ConfigError(f"{key} must be true or false, got {self.values[key]!r}") from exc

    def int_list(self, key: str) -> list[int] | None:
        if self.values[key] == "auto":
            return None
        try:
            return [int(v) for v in self.values[key].split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"{key} must be comma-separated integers") from exc

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            variant=self["variant"],
            input_channels=self.int("input_channels"),
            input_size=self.int("input_size"),
            num_classes=num_classes,
            stage_widths=self.int_list("stage_widths"),
            blocks_per_stage=self.int_list("blocks_per_stage"),
        )

    def augmentation(self) -> AugmentationSpec:
        deg = self.float("rotation_deg")
        return AugmentationSpec(
            factor=self.int("aug_factor"),
            pool=tuple(p.strip() for p in self["aug_pool"].split(",") if p.strip()),
            crop_fraction_range=(self.float("crop_fraction_min"), self.float("crop_fraction_max")),
            rotation_range_deg=(-deg, deg),
            translation_range=self.float("translation"),
            seed=self.int("aug_seed"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.int("epochs"),
            batch_size=self.int("batch_size"),
            learning_rate=self.float("learning_rate"),
            lambda1=self.float("lambda1"),
            optimizer=self["optimizer"],
            adam_betas=(self.float("adam_beta1"), self.float("adam_beta2")),
            adam_eps=self.float("adam_eps"),
            sgd_momentum=self.float("sgd_momentum"),
            seed=self.int("seed"),
            bn_freeze=self.bool("bn_freeze"),
            trainable_selector=self["trainable"],
            augmentation=self.augmentation(),
            aug_mode=self["aug_mode"],
        )

    def saliency_config(self, image_side: int) -> SaliencyConfig:
        default = SaliencyConfig.default_for(image_side)
        n = default.window_n if self["saliency_window"] == "auto" else self.int("saliency_window")
        s = max(1, n // 2) if self["saliency_stride"] == "auto" else self.int("saliency_stride")
        return SaliencyConfig(window_n=n, stride_s=s)

    def to_text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in DEFAULTS)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def encode_names(names: list[str]) -> str:
    return json.dumps(names, ensure_ascii=False, separators=(",", ":"))


def decode_names(text: str) -> list[str]:
    try:
        names = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed class_names metadata: {exc}") from exc
    return [str(n) for n in names]
