"""Leaky integrate-and-fire dynamics with surrogate-gradient firing.

One simulation step is charge -> fire -> reset:

    LIF charge    Q_t = V_{t-1} + (1/tau_m) * (-(V_{t-1} - V_rest) + I_t)
    PLIF charge   Q_t = (1 - g(a)) * V_{t-1} + g(a) * (V_rest + I_t)
    fire          O_t = step(Q_t - V_th)          with step(0) = 1
    reset         V_t = Q_t * (1 - O_t) + V_rest * O_t

PLIF replaces the fixed time constant with tau_m = 1/g(a) where g is the
logistic sigmoid, making the leak a learnable scalar per layer; a = 0 gives
tau_m = 2.  The two charge rules agree exactly when tau_m = 1/g(a).

Firing is non-differentiable, so the backward pass substitutes the derivative
of a smooth step

    smooth(x)  = (1/pi) * arctan((pi/2) * alpha * x) + 1/2
    smooth'(x) = alpha / (2 * (1 + ((pi/2) * alpha * x)^2))

while the forward emits hard 0/1 spikes.  Gradients flow through the reset
product as well; nothing is detached.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, unary_from, _record, _result, _tracks


@dataclass(frozen=True)
class NeuronConfig:
    """Static per-layer neuron parameters (the learnable PLIF leak lives in
    the layer, not here)."""

    kind: str = "plif"
    v_threshold: float = 1.0
    v_rest: float = 0.0
    alpha: float = 2.0
    tau_m: float = 2.0  # fixed time constant, LIF only

    def __post_init__(self):
        if self.kind not in ("plif", "lif"):
            raise ValueError(f"neuron kind must be 'plif' or 'lif', got {self.kind!r}")
        if not self.v_threshold > self.v_rest:
            raise ValueError("v_threshold must exceed v_rest")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.kind == "lif" and not self.tau_m > 1.0:
            raise ValueError("tau_m must exceed 1")


@dataclass
class NeuronLayerState:
    """Carried membrane potential; a fresh state starts at V_rest."""

    v: Tensor


def init_state(cfg, shape):
    return NeuronLayerState(v=Tensor(np.full(shape, cfg.v_rest)))


def sigmoid(x):
    # two-branch form saturates instead of overflowing for extreme x
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def tau_of(a):
    """Membrane time constant encoded by a PLIF leak parameter: 1/sigmoid(a)."""
    g = sigmoid(a)
    return math.inf if g == 0.0 else 1.0 / g


def leak_of(tau_m):
    """Inverse of :func:`tau_of`, used to seed the leak parameter."""
    if not tau_m > 1.0:
        raise ValueError("tau_m must exceed 1")
    return -math.log(tau_m - 1.0)


def heaviside(x):
    """Hard step with step(0) = 1; forward-only, never recorded."""
    return Tensor((x.values >= 0.0).astype(np.float64))


def surrogate_step(x, alpha):
    """Smooth stand-in for the hard step, values only."""
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return np.arctan((math.pi / 2.0) * alpha * x) / math.pi + 0.5


def surrogate_grad(x, alpha):
    """Derivative of :func:`surrogate_step`; at 0 it equals alpha / 2."""
    x = x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    t = (math.pi / 2.0) * alpha * x
    return alpha / (2.0 * (1.0 + t * t))


def lif_charge(v_prev, inp, cfg):
    """One LIF integration step, fused with its backward rule."""
    inv_tau = 1.0 / cfg.tau_m
    q = v_prev.values + inv_tau * (-(v_prev.values - cfg.v_rest) + inp.values)
    out = _result(q, "lif_charge")
    if _tracks(v_prev, inp):

        def fn():
            if v_prev.requires_grad:
                v_prev.grad += out.grad * (1.0 - inv_tau)
            if inp.requires_grad:
                inp.grad += out.grad * inv_tau

        _record("lif_charge", out, (v_prev, inp), fn)
    return out


def plif_charge(v_prev, inp, a, cfg):
    """One PLIF integration step; ``a`` is the scalar leak parameter."""
    g = sigmoid(a.item())
    q = (1.0 - g) * v_prev.values + g * (cfg.v_rest + inp.values)
    out = _result(q, "plif_charge")
    if _tracks(v_prev, inp, a):

        def fn():
            if v_prev.requires_grad:
                v_prev.grad += out.grad * (1.0 - g)
            if inp.requires_grad:
                inp.grad += out.grad * g
            if a.requires_grad:
                lever = cfg.v_rest + inp.values - v_prev.values
                a.grad += g * (1.0 - g) * float((out.grad * lever).sum())

        _record("plif_charge", out, (v_prev, inp, a), fn)
    return out


def fire(q, cfg, *, soft=False):
    """Emit spikes from charge ``q``.

    Forward is the hard step on q - v_threshold (or the smooth step when
    ``soft``, which makes the whole network differentiable for gradient
    checking).  Backward applies the smooth step's derivative either way.
    """
    centered = q.values - cfg.v_threshold
    if soft:
        values = np.arctan((math.pi / 2.0) * cfg.alpha * centered) / math.pi + 0.5
    else:
        values = (centered >= 0.0).astype(np.float64)
    slope = surrogate_grad(centered, cfg.alpha)
    return unary_from(q, values, lambda g: g * slope, name="fire")


def reset(q, spikes, cfg, *, soft=False):
    """Hard reset to V_rest where a spike fired; gradients flow through both
    the charge and the spike factor."""
    if not soft:
        s = spikes.values
        if not np.all((s == 0.0) | (s == 1.0)):
            raise ValueError("reset: spikes must be binary")
    v = q.values * (1.0 - spikes.values) + cfg.v_rest * spikes.values
    out = _result(v, "reset")
    if _tracks(q, spikes):

        def fn():
            if q.requires_grad:
                q.grad += out.grad * (1.0 - spikes.values)
            if spikes.requires_grad:
                spikes.grad += out.grad * (cfg.v_rest - q.values)

        _record("reset", out, (q, spikes), fn)
    return out


def step(state, inp, cfg, a=None, *, soft=False):
    """charge -> fire -> reset; returns (spikes, next state)."""
    if cfg.kind == "plif":
        if a is None:
            raise ValueError("step: PLIF needs the leak parameter a")
        q = plif_charge(state.v, inp, a, cfg)
    else:
        q = lif_charge(state.v, inp, cfg)
    spikes = fire(q, cfg, soft=soft)
    return spikes, NeuronLayerState(v=reset(q, spikes, cfg, soft=soft))


@dataclass(frozen=True)
class SpikeTrain:
    """Timestep-major record of emitted spikes, shape (T, batch, features)."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("SpikeTrain expects (T, batch, features)")

    @property
    def timesteps(self):
        return self.values.shape[0]

    def rate(self):
        """Per-sample, per-feature firing rate: mean spikes over time."""
        return self.values.mean(axis=0)
