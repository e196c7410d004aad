"""Regularised cross-entropy, Adam/SGD, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .data.augment import AugmentationSpec, expand
from .data.dataset import Sample
from .data.preprocess import preprocess_image
from .errors import ConfigError, DataError, ShapeError
from .model import Model, parse_selector, set_trainable
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

AUG_MODES = ("online", "offline")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 24
    learning_rate: float = 1e-4
    lambda1: float = 1e-4
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    sgd_momentum: float = 0.0
    seed: int = 0
    bn_freeze: bool = False
    trainable_selector: str = "all"
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    aug_mode: str = "online"
    # stop after the first epoch whose training accuracy reaches this value
    stop_at_train_acc: float | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.aug_mode not in AUG_MODES:
            raise ConfigError(f"aug_mode must be one of {AUG_MODES}")
        parse_selector(self.trainable_selector)


# ------------------------------------------------------------------------ loss


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(q: Tensor, p) -> Tensor:
    """Mean over the batch of -sum_i p_i log(max(q_i, 1e-12))."""
    return F.cross_entropy(q, p)


def total_loss(logits: Tensor, labels, w_fc: Tensor, lambda1: float) -> Tensor:
    """Cross-entropy of softmax(logits) plus ``lambda1 * ||w_fc||_F^2``.

    ``labels`` may be class indices or a (B, K) target distribution.
    """
    if lambda1 < 0:
        raise ConfigError(f"lambda1 must be non-negative, got {lambda1}")
    target = np.asarray(labels)
    if target.ndim == 1:
        target = one_hot(target, logits.shape[1], logits.dtype)
    ce = cross_entropy(F.softmax(logits), target)
    return F.add(ce, F.scale(F.square_sum(w_fc), lambda1))


# ------------------------------------------------------------------- optimizers


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; ``t`` is the 1-based step count. Returns (param, m, v)."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {m.shape}/{v.shape}")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, model: Model, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        self.model = model
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self) -> None:
        self.t += 1
        for name, p in self.model.trainable_params():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            new, m, v = adam_step(p.data, grad, m, v, self.t, self.lr, self.betas, self.eps)
            p.data[...] = new
            self.state[name] = (m, v)


class SGD:
    def __init__(self, model: Model, lr: float, momentum: float = 0.0) -> None:
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.model.trainable_params():
            if p.grad is None:
                continue
            v = self.momentum * self.velocity.get(name, np.zeros_like(p.data)) + p.grad
            self.velocity[name] = v
            p.data[...] = p.data - self.lr * v


def make_optimizer(model: Model, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(model, config.learning_rate, config.adam_betas, config.adam_eps)
    return SGD(model, config.learning_rate, config.sgd_momentum)


# --------------------------------------------------------------------- reports


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    head_norm: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("nan")
    best_state: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def final_train_acc(self) -> float:
        return self.epochs[-1].train_acc

    def write_csv(self, path: str | Path, header: dict[str, object] | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for key, value in (header or {}).items():
                fh.write(f"# {key}={value}\n")
            fh.write(f"# best_epoch={self.best_epoch}\n# best_val_acc={self.best_val_acc!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_acc)])


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    predictions: np.ndarray

    def write_csv(self, prefix: str | Path, class_names: Sequence[str] | None = None) -> list[Path]:
        """Write ``<prefix>confusion.csv`` and ``<prefix>per_class.csv``; returns the paths."""
        k = self.confusion.shape[0]
        names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
        conf_path = Path(f"{prefix}confusion.csv")
        with open(conf_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *names])
            for name, row in zip(names, self.confusion):
                w.writerow([name, *map(int, row)])
        class_path = Path(f"{prefix}per_class.csv")
        with open(class_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "count", "correct", "accuracy"])
            for i, name in enumerate(names):
                w.writerow([name, int(self.confusion[i].sum()), int(self.confusion[i, i]), repr(float(self.per_class_accuracy[i]))])
            w.writerow(["overall", int(self.confusion.sum()), int(np.trace(self.confusion)), repr(self.accuracy)])
        return [conf_path, class_path]


# ------------------------------------------------------------------ evaluation


def predict_logits(model: Model, batch: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.forward(Tensor(batch, dtype=model.dtype), "eval").data


def evaluate(model: Model, test_set: Sequence[Sample], batch_size: int = 64) -> EvalReport:
    """Top-1 accuracy and confusion matrix on un-augmented inputs (ties pick the lowest class)."""
    if not test_set:
        raise DataError("cannot evaluate on an empty test set")
    k = model.config.num_classes
    size, channels = model.config.input_size, model.config.input_channels
    preds = []
    for start in range(0, len(test_set), batch_size):
        chunk = test_set[start : start + batch_size]
        x = np.stack([preprocess_image(s.image, size, channels) for s in chunk])
        preds.append(predict_logits(model, x).argmax(axis=1))
    pred = np.concatenate(preds)
    truth = np.array([s.subject_id for s in test_set])
    if truth.max() >= k:
        raise DataError(f"test label {truth.max()} outside the model's {k} classes")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    return EvalReport(float(np.trace(confusion) / confusion.sum()), per_class, confusion, pred)


# -------------------------------------------------------------------- training


def _epoch_spec(spec: AugmentationSpec, epoch: int, mode: str) -> AugmentationSpec:
    if mode == "offline":
        return spec
    seed = int(np.random.SeedSequence([spec.seed, epoch]).generate_state(1)[0])
    return replace(spec, seed=seed)


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state()}


def restore(model: Model, state: dict[str, np.ndarray]) -> None:
    for name, arr in state.items():
        if name in model.params:
            model.params[name].data[...] = arr
        else:
            model.buffers[name][...] = arr


def train(
    model: Model,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    config: TrainConfig,
    restore_best: bool = True,
) -> TrainReport:
    """Fine-tune ``model`` for ``config.epochs`` epochs and pick the best epoch on validation.

    The training list is augmented to ``factor`` times its size each epoch
    (fresh transforms per epoch in online mode, fixed ones in offline mode),
    shuffled with a generator seeded by (seed, epoch) and consumed in batches;
    the last short batch is kept. With ``restore_best`` the model ends up
    holding the parameters of the earliest epoch with the highest validation
    accuracy.
    """
    if not train_set or not val_set:
        raise DataError("training needs non-empty train and validation sets")
    set_trainable(model, config.trainable_selector)
    model.bn_freeze = config.bn_freeze
    optimizer = make_optimizer(model, config)
    size, channels = model.config.input_size, model.config.input_channels
    k = model.config.num_classes
    cache: dict[str, np.ndarray] = {}

    def inputs(sample: Sample) -> np.ndarray:
        if sample.is_augmented:
            return preprocess_image(sample.image, size, channels)
        if sample.key not in cache:
            cache[sample.key] = preprocess_image(sample.image, size, channels)
        return cache[sample.key]

    report = TrainReport()
    best = -1.0
    offline = expand(list(train_set), config.augmentation) if config.aug_mode == "offline" else None
    for epoch in range(1, config.epochs + 1):
        samples = offline if offline is not None else expand(
            list(train_set), _epoch_spec(config.augmentation, epoch, config.aug_mode)
        )
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            labels = np.array([s.subject_id for s in batch])
            try:
                x = Tensor(np.stack([inputs(s) for s in batch]), dtype=model.dtype)
                logits = model.forward(x, "train")
                loss = total_loss(logits, one_hot(labels, k, model.dtype), model.head_weight, config.lambda1)
            except (ShapeError, ValueError) as exc:
                raise DataError(f"epoch {epoch}, batch {b}: {exc}") from exc
            model.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        val_acc = evaluate(model, val_set).accuracy
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(samples),
            train_acc=correct / len(samples),
            val_acc=val_acc,
            head_norm=float(np.sqrt((model.head_weight.data.astype(np.float64) ** 2).sum())),
        )
        report.epochs.append(record)
        log.info(
            "epoch %d/%d loss %.4f train_acc %.4f val_acc %.4f",
            epoch, config.epochs, record.train_loss, record.train_acc, val_acc,
        )
        if val_acc > best:
            best = val_acc
            report.best_epoch = epoch
            report.best_val_acc = val_acc
            report.best_state = _snapshot(model)
        if config.stop_at_train_acc is not None and record.train_acc >= config.stop_at_train_acc:
            break
    if restore_best:
        restore(model, report.best_state)
    return report
