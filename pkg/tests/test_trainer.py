import math

import numpy as np
import pytest

from fingernet import functional as F
from fingernet.data.augment import AugmentationSpec
from fingernet.data.dataset import Sample, ingest_dataset, split
from fingernet.errors import ConfigError, DataError, ShapeError
from fingernet.model import ModelConfig, build_resnet
from fingernet.tensor import Tensor
from fingernet.trainer import (
    Adam,
    TrainConfig,
    TrainReport,
    adam_step,
    cross_entropy,
    evaluate,
    one_hot,
    total_loss,
    train,
)

from oracles import cross_entropy_loops


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (100, 24, 1e-4)
    assert cfg.adam_betas == (0.9, 0.999) and cfg.adam_eps == 1e-8


@pytest.mark.parametrize(
    "kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0}, {"lambda1": -1.0}, {"optimizer": "rmsprop"}]
)
def test_train_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ----------------------------------------------------------------------- loss


def test_cross_entropy_perfect_prediction():
    assert cross_entropy(Tensor([[1.0, 0.0]]), [[1.0, 0.0]]).item() == 0.0


@pytest.mark.parametrize("target", [[[1.0, 0.0]], [[0.0, 1.0]]])
def test_cross_entropy_uniform_is_ln2(target):
    assert cross_entropy(Tensor([[0.5, 0.5]], dtype=np.float64), target).item() == pytest.approx(0.693147, abs=1e-6)


def test_cross_entropy_matches_loop_oracle():
    rng = np.random.default_rng(0)
    q = rng.random((6, 5))
    q /= q.sum(axis=1, keepdims=True)
    p = one_hot(rng.integers(0, 5, 6), 5, np.float64)
    got = cross_entropy(Tensor(q, dtype=np.float64), p).item()
    assert abs(got - cross_entropy_loops(q, p)) < 1e-6


def test_cross_entropy_clamps_zero_probability():
    loss = cross_entropy(Tensor([[0.0, 1.0]], dtype=np.float64), [[1.0, 0.0]]).item()
    assert loss == pytest.approx(-math.log(1e-12))


def test_cross_entropy_dimension_mismatch():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor([[0.5, 0.5]]), [[1.0, 0.0, 0.0]])


def test_total_loss_lambda_zero_is_cross_entropy():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((4, 3)))
    w = Tensor(rng.standard_normal((8, 3)))
    y = [0, 2, 1, 1]
    ce = cross_entropy(F.softmax(logits), one_hot(y, 3))
    assert total_loss(logits, y, w, 0.0).item() == ce.item()


def test_total_loss_ones_example():
    logits = Tensor([[100.0, 0.0], [0.0, 100.0]], dtype=np.float64)
    w = Tensor(np.ones((2, 2)), dtype=np.float64)
    assert total_loss(logits, [0, 1], w, 0.01).item() == pytest.approx(0.04, abs=1e-12)


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        total_loss(Tensor([[0.0, 1.0]]), [0], Tensor(np.ones((2, 2))), -0.1)


# ------------------------------------------------------------------ optimizer


def test_adam_first_step_is_lr_sized():
    rng = np.random.default_rng(2)
    g = rng.uniform(1, 5, 10) * rng.choice([-1, 1], 10)
    p = np.zeros(10)
    new, _, _ = adam_step(p, g, np.zeros(10), np.zeros(10), 1, lr=0.01)
    delta = np.abs(new - p)
    assert ((delta >= 0.99 * 0.01) & (delta <= 0.01)).all()
    assert (np.sign(new - p) == -np.sign(g)).all()


def test_adam_zero_gradient_keeps_parameters_bitwise():
    model = build_resnet(ModelConfig("resnet_mini", 1, 16, 3), 0)
    snap = {n: p.data.copy() for n, p in model.params.items()}
    opt = Adam(model, lr=0.1)
    for _ in range(5):
        for p in model.params.values():
            p.grad = np.zeros_like(p.data)
        opt.step()
    assert all(np.array_equal(p.data, snap[n]) for n, p in model.params.items())


def test_adam_quadratic_reference():
    w, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 101):
        w, m, v = adam_step(w, 2 * (w - 3), m, v, t, lr=0.1)
    assert abs(w[0] - 3) < 0.5


# -------------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny(tiny_root):
    ds = ingest_dataset(tiny_root)
    plan = split(ds, seed=0, val_per_subject=1)
    return ds, plan.select(ds, "train"), plan.select(ds, "val"), plan.select(ds, "test")


def _mini(k=4, seed=0):
    return build_resnet(ModelConfig("resnet_mini", 1, 32, k), seed)


def test_huge_lambda_shrinks_head_every_epoch(tiny):
    _, tr, va, _ = tiny
    cfg = TrainConfig(epochs=5, batch_size=8, learning_rate=1e-3, lambda1=1e6, augmentation=AugmentationSpec(factor=1))
    model = _mini()
    start = float(np.linalg.norm(model.head_weight.data))
    report = train(model, tr, va, cfg, restore_best=False)
    norms = [start] + [r.head_norm for r in report.epochs]
    assert all(b < a for a, b in zip(norms, norms[1:])), norms


def test_training_is_deterministic(tiny):
    _, tr, va, _ = tiny
    cfg = TrainConfig(epochs=2, batch_size=5, learning_rate=1e-3)
    reports, models = [], []
    for _ in range(2):
        model = _mini()
        reports.append(train(model, tr, va, cfg))
        models.append(model)
    a, b = reports
    assert a.epochs == b.epochs and a.best_epoch == b.best_epoch
    for (_, x), (_, y) in zip(models[0].state(), models[1].state()):
        assert np.array_equal(x, y)


def test_best_epoch_is_earliest_maximum(tiny):
    _, tr, va, _ = tiny
    report = train(_mini(), tr, va, TrainConfig(epochs=4, batch_size=8, learning_rate=1e-3))
    accs = [r.val_acc for r in report.epochs]
    assert report.best_epoch == 1 + accs.index(max(accs))
    assert report.best_val_acc == max(accs)


def test_restored_model_reproduces_best_validation_accuracy(tiny):
    _, tr, va, _ = tiny
    model = _mini()
    report = train(model, tr, va, TrainConfig(epochs=3, batch_size=8, learning_rate=1e-3))
    assert evaluate(model, va).accuracy == report.best_val_acc


def test_offline_augmentation_multiplies_epoch_size(tiny):
    _, tr, va, _ = tiny
    cfg = TrainConfig(epochs=1, batch_size=8, learning_rate=1e-3, aug_mode="offline")
    report = train(_mini(), tr, va, cfg)
    # train_acc is a fraction of the expanded set, so its denominator is 3 * len(tr)
    assert (report.epochs[0].train_acc * 3 * len(tr)) == pytest.approx(round(report.epochs[0].train_acc * 3 * len(tr)))


def test_frozen_head_only_training_keeps_backbone(tiny):
    _, tr, va, _ = tiny
    model = _mini()
    snap = {n: p.data.copy() for n, p in model.params.items()}
    train(model, tr, va, TrainConfig(epochs=1, batch_size=8, learning_rate=1e-2, trainable_selector="head_only"))
    for name, p in model.params.items():
        assert np.array_equal(p.data, snap[name]) == (not name.startswith("fc.")), name


def test_bad_batch_reports_epoch_and_batch(tiny):
    _, tr, va, _ = tiny
    bad = list(tr) + [Sample(subject_id=9, image=tr[0].image, subject_name="zz", image_name="x")]
    with pytest.raises(DataError, match=r"epoch 1, batch \d+"):
        train(_mini(), bad, va, TrainConfig(epochs=1, batch_size=len(bad), augmentation=AugmentationSpec(factor=1)))


def test_report_csv(tmp_path):
    from fingernet.trainer import EpochRecord

    report = TrainReport([EpochRecord(1, 0.5, 0.25, 0.75, 1.0)], best_epoch=1, best_val_acc=0.75)
    path = tmp_path / "r.csv"
    report.write_csv(path, {"batch_size": 24})
    lines = path.read_text().splitlines()
    assert lines[0] == "# batch_size=24"
    assert "epoch,train_loss,train_acc,val_acc" in lines
    assert lines[-1] == "1,0.5,0.25,0.75"


# ------------------------------------------------------------------ evaluation


class _Constant:
    """Stand-in model whose logits always favour one class."""

    def __init__(self, k, winner=0, shift=0.0):
        self.config = ModelConfig("resnet_mini", 1, 32, k)
        self.k, self.winner, self.shift = k, winner, shift
        self.dtype = np.float32

    def forward(self, x, mode="eval"):
        logits = np.full((x.shape[0], self.k), self.shift, np.float32)
        logits[:, self.winner] += 1
        return Tensor(logits)


def test_constant_predictor_scores_one_over_k(tiny):
    ds, _, _, test = tiny
    report = evaluate(_Constant(ds.num_classes), test)
    assert report.accuracy == pytest.approx(1 / ds.num_classes)
    assert (report.confusion[:, 0] == report.confusion.sum(axis=1)).all()


def test_argmax_invariant_to_logit_shift(tiny):
    ds, _, _, test = tiny
    a = evaluate(_Constant(ds.num_classes, 2), test)
    b = evaluate(_Constant(ds.num_classes, 2, shift=123.0), test)
    assert np.array_equal(a.predictions, b.predictions)


def test_confusion_consistency(tiny):
    ds, _, _, test = tiny
    report = evaluate(_mini(ds.num_classes, 3), test)
    counts = np.bincount([s.subject_id for s in test], minlength=ds.num_classes)
    assert np.array_equal(report.confusion.sum(axis=1), counts)
    assert report.accuracy == np.trace(report.confusion) / report.confusion.sum()


def test_evaluate_empty_rejected():
    with pytest.raises(DataError):
        evaluate(_mini(), [])


def test_eval_report_csv(tiny, tmp_path):
    ds, _, _, test = tiny
    paths = evaluate(_Constant(ds.num_classes), test).write_csv(tmp_path / "e_", ds.class_names)
    header = paths[0].read_text().splitlines()[0].split(",")
    assert header[1:] == ds.class_names


def test_stop_at_train_acc_ends_early(tiny):
    _, tr, va, _ = tiny
    cfg = TrainConfig(epochs=50, batch_size=8, learning_rate=1e-3, stop_at_train_acc=0.0)
    assert len(train(_mini(), tr, va, cfg).epochs) == 1
