"""Optimizers, the training epoch, evaluation, and macro metrics."""

import time
from dataclasses import dataclass

import numpy as np

from .curriculum import cal_loss, cross_entropy
from .data import batches
from .rng import derive
from .tensor import Tape, backward


class NonFiniteLossError(RuntimeError):
    """A forward pass or loss produced NaN or infinity; training must stop."""


class SGD:
    """Plain SGD with optional momentum."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.values -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        scale = self.lr * np.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(p.grad)
            p.values -= scale * m / (np.sqrt(v) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def make_optimizer(kind, params, lr, momentum=0.9):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr, momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # confusion[true, predicted]


@dataclass(frozen=True)
class EpochReport:
    """One row of training metrics; macro scores are on the test split."""

    epoch: int
    base_loss: float
    cal_loss: float
    train_acc: float
    test_acc: float
    mean_omega: float
    macro_p: float
    macro_r: float
    macro_f1: float
    seconds: float


def train_epoch(model, train_ds, test_ds, cur_cfg, opt, *, epoch, seed,
                batch_size):
    """One optimization pass plus train/test evaluation.

    Batch order reshuffles per epoch from (seed, epoch); dropout masks are
    keyed by (seed, epoch) as well.  A non-finite loss aborts with a
    diagnostic before any parameter update from that batch.
    """
    t0 = time.perf_counter()
    dropout_seed = derive(seed, "dropout", epoch)
    records = []
    for ids, inputs, labels in batches(train_ds, batch_size,
                                       seed=derive(seed, "order", epoch)):
        tape = Tape()
        try:
            with tape:
                p, _ = model.forward(inputs, training=True, sample_ids=ids,
                                     dropout_seed=dropout_seed)
                losses = cross_entropy(p, labels)
                total, recs = cal_loss(losses, cur_cfg, sample_ids=ids,
                                       epoch=epoch)
            backward(total)
        except FloatingPointError as err:
            raise NonFiniteLossError(
                f"epoch {epoch}, after {len(records)} samples: {err}; "
                "stopping before the parameter update") from err
        opt.step()
        opt.zero_grad()
        records.extend(recs)

    train_eval = evaluate(model, train_ds, batch_size)
    test_eval = evaluate(model, test_ds, batch_size) if test_ds is not None else None
    macro_p = macro_r = macro_f1 = float("nan")
    if test_eval is not None:
        macro_p, macro_r, macro_f1 = macro_metrics(test_eval.confusion)
    base = float(np.mean([r.base_loss for r in records]))
    cal = float(np.mean([r.weighted_loss for r in records]))
    omega = float(np.mean([r.omega for r in records]))
    report = EpochReport(
        epoch=epoch,
        base_loss=base,
        cal_loss=cal,
        train_acc=train_eval.accuracy,
        test_acc=test_eval.accuracy if test_eval else float("nan"),
        mean_omega=omega,
        macro_p=macro_p,
        macro_r=macro_r,
        macro_f1=macro_f1,
        seconds=time.perf_counter() - t0,
    )
    return report, records


def evaluate(model, ds, batch_size=256):
    """Deterministic-order evaluation; argmax ties resolve to the lowest class."""
    classes = ds.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    correct = 0
    for ids, inputs, labels in batches(ds, batch_size, shuffle=False):
        p, _ = model.forward(inputs, training=False, sample_ids=ids)
        pred = np.argmax(p.values, axis=1)  # first maximum, lowest index
        correct += int((pred == labels).sum())
        np.add.at(confusion, (labels, pred), 1)
    return EvalResult(accuracy=correct / len(ds), confusion=confusion)


def macro_metrics(confusion):
    """Macro precision, recall, F1; empty denominators contribute 0."""
    classes = confusion.shape[0]
    precision = np.zeros(classes)
    recall = np.zeros(classes)
    f1 = np.zeros(classes)
    for k in range(classes):
        tp = confusion[k, k]
        predicted = confusion[:, k].sum()
        actual = confusion[k, :].sum()
        if predicted:
            precision[k] = tp / predicted
        if actual:
            recall[k] = tp / actual
        if precision[k] + recall[k] > 0:
            f1[k] = 2.0 * precision[k] * recall[k] / (precision[k] + recall[k])
    return float(precision.mean()), float(recall.mean()), float(f1.mean())
