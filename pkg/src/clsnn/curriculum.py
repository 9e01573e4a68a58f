"""Confidence-weighted loss with closed-form per-sample weights.

Each sample's cross-entropy l_i is reweighted by a confidence omega_i:

    weighted_i = (l_i - eps) * omega_i + lam * (log omega_i)^2

where eps is a difficulty threshold (fixed at log(num_classes), or the batch
mean loss in dynamic mode) and lam controls how strongly the regularizer
pulls omega toward 1.  Minimizing over omega at fixed l_i gives the
stationarity condition (l_i - eps) + 2 * lam * log(omega) / omega = 0, whose
solution on the principal branch of the Lambert W function is

    omega_i = exp(-W(max(-2/e, (l_i - eps) / lam) / 2))

The inner clamp keeps W's argument at or above the branch point -1/e, which
caps omega at e: easy samples (loss well below eps) saturate at weight e,
hard ones decay smoothly toward 0.  As lam -> 0 the weights collapse to the
exact limit {e, 1, 0} for losses below, at, and above eps.

Weights are computed from detached losses: the gradient of the batch loss
w.r.t. l_i is exactly omega_i / batch_size, never a second-order term.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, mean, mul, sub, _record, _result, _tracks

_BRANCH = -1.0 / math.e


def lambert_w(x):
    """Principal branch W(x) for x >= -1/e, solving w * e^w = x.

    Halley's iteration from log(1 + x) for x >= 0, or from the branch-point
    series w = -1 + p - p^2/3 + (11/72) p^3 with p = sqrt(2 (e x + 1)) for
    negative x.  Converges to a relative residual of ~1e-13 in a handful of
    steps across the whole domain.
    """
    x = float(x)
    if math.isnan(x) or x < _BRANCH - 1e-12:
        raise ValueError(f"lambert_w: x must be >= -1/e, got {x}")
    if x <= _BRANCH + 1e-15:
        return -1.0
    if x == 0.0:
        return 0.0
    if x >= 0.0:
        w = math.log1p(x)
    else:
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        w = -1.0 + p - p * p / 3.0 + (11.0 / 72.0) * p * p * p
    for _ in range(50):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * max(1.0, abs(x)):
            break
        wp1 = w + 1.0
        # Halley step: f / (f' - f * f'' / (2 f'))
        w -= f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
    return w


def confidence(loss, epsilon, lam):
    """Closed-form minimizer of the weighted objective for one sample."""
    if lam <= 0.0:
        raise ValueError("confidence: lam must be positive; "
                         "confidence_lambda_zero handles the exact limit")
    z = 0.5 * max(-2.0 / math.e, (loss - epsilon) / lam)
    return math.exp(-lambert_w(z))


def confidence_lambda_zero(loss, epsilon):
    """Exact lam -> 0 limit of :func:`confidence`: e, 1, or 0."""
    if loss < epsilon:
        return math.e
    if loss == epsilon:
        return 1.0
    return 0.0


@dataclass(frozen=True)
class CurriculumConfig:
    """How eps and lam are resolved for each batch.

    ``fixed`` mode pins eps at log(num_classes), the loss of a uniform
    prediction; ``dynamic`` mode uses the batch's mean loss.
    """

    epsilon_mode: str = "dynamic"
    lam: float = 1.0
    num_classes: int = 0

    def __post_init__(self):
        if self.epsilon_mode not in ("fixed", "dynamic"):
            raise ValueError(f"epsilon_mode must be 'fixed' or 'dynamic', "
                             f"got {self.epsilon_mode!r}")
        if self.lam < 0.0:
            raise ValueError("lam must be >= 0")
        if self.epsilon_mode == "fixed" and self.num_classes < 2:
            raise ValueError("fixed epsilon needs num_classes >= 2")

    @property
    def fixed_epsilon(self):
        return math.log(self.num_classes)


def resolve_epsilon(losses, cfg):
    """Difficulty threshold for one batch of detached per-sample losses."""
    if cfg.epsilon_mode == "fixed":
        return cfg.fixed_epsilon
    return float(np.mean(losses))


@dataclass(frozen=True)
class ConfidenceRecord:
    """One sample's curriculum bookkeeping for one epoch."""

    sample_id: int
    epoch: int
    base_loss: float
    omega: float
    weighted_loss: float


def cross_entropy(p, labels):
    """Per-sample cross-entropy from predicted probabilities.

    ``p`` is (batch, classes) with rows summing to 1 (checked to 1e-6);
    the selected probability is floored at 1e-12 before the log.  Returns a
    1-d tensor of losses, one per row.
    """
    if p.ndim != 2:
        raise ValueError(f"cross_entropy: p must be 2-d, got {p.ndim}-d")
    labels = np.asarray(labels)
    if labels.shape != (p.shape[0],):
        raise ValueError("cross_entropy: one label per row required")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError("cross_entropy: label out of range")
    sums = p.values.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("cross_entropy: rows of p must sum to 1")
    rows = np.arange(p.shape[0])
    sel = p.values[rows, labels]
    clipped = np.maximum(sel, 1e-12)
    out = _result(-np.log(clipped), "cross_entropy")
    if _tracks(p):

        def fn():
            # zero slope inside the floor region
            live = sel >= 1e-12
            p.grad[rows, labels] -= np.where(live, out.grad / clipped, 0.0)

        _record("cross_entropy", out, (p,), fn)
    return out


def cal_loss(losses, cfg, sample_ids=None, epoch=0):
    """Confidence-weighted batch loss.

    ``losses`` is the 1-d tensor of per-sample base losses (on tape); the
    weights omega_i are computed from its detached values, so the returned
    scalar's gradient w.r.t. l_i is exactly omega_i / batch_size.  Returns
    the scalar loss and one :class:`ConfidenceRecord` per sample.
    """
    if losses.ndim != 1 or losses.shape[0] == 0:
        raise ValueError("cal_loss: losses must be a non-empty 1-d tensor")
    detached = losses.values
    batch = detached.shape[0]
    if sample_ids is None:
        sample_ids = range(batch)
    eps = resolve_epsilon(detached, cfg)

    if cfg.lam > 0.0:
        omegas = np.array([confidence(l, eps, cfg.lam) for l in detached])
        reg = cfg.lam * np.square(np.log(omegas))
    else:
        omegas = np.array([confidence_lambda_zero(l, eps) for l in detached])
        reg = np.zeros(batch)  # lam * (log omega)^2 vanishes in the limit

    weighted = (detached - eps) * omegas + reg
    records = [
        ConfidenceRecord(int(sid), epoch, float(l), float(w), float(c))
        for sid, l, w, c in zip(sample_ids, detached, omegas, weighted)
    ]
    total = mean(mul(sub(losses, eps), Tensor(omegas))) + float(np.mean(reg))
    return total, records
