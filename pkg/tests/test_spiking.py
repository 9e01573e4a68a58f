"""Neuron dynamics: charge/fire/reset rules, surrogate slopes, state scans."""

import math

import numpy as np
import pytest

from clsnn import spiking as S
from clsnn.tensor import Tape, Tensor, backward, tensor_sum

from oracles import finite_diff, lif_simulate


def test_config_validation():
    with pytest.raises(ValueError):
        S.NeuronConfig(kind="izhikevich")
    with pytest.raises(ValueError):
        S.NeuronConfig(v_threshold=0.0, v_rest=0.0)
    with pytest.raises(ValueError):
        S.NeuronConfig(alpha=0.0)
    with pytest.raises(ValueError):
        S.NeuronConfig(kind="lif", tau_m=1.0)


def test_tau_leak_round_trip():
    assert S.tau_of(0.0) == 2.0
    assert S.leak_of(2.0) == 0.0
    for tau in (1.5, 2.0, 5.0, 100.0):
        assert abs(S.tau_of(S.leak_of(tau)) - tau) < 1e-12


def test_heaviside_fires_at_zero():
    out = S.heaviside(Tensor([-1.0, -1e-12, 0.0, 1e-12, 1.0]))
    assert np.array_equal(out.values, [0.0, 0.0, 1.0, 1.0, 1.0])
    assert not out.requires_grad


def test_surrogate_step_shape_and_limits():
    x = np.linspace(-50.0, 50.0, 401)
    for alpha in (0.5, 1.0, 2.0, 4.0):
        y = S.surrogate_step(x, alpha)
        assert np.all(np.diff(y) > 0.0)  # strictly increasing
        assert 0.0 < y[0] < 0.01 and 0.99 < y[-1] < 1.0
        assert abs(S.surrogate_step(np.array(0.0), alpha) - 0.5) < 1e-15


def test_surrogate_grad_closed_forms():
    # alpha = 2 collapses to 1 / (1 + (pi x)^2)
    x = np.linspace(-3.0, 3.0, 101)
    np.testing.assert_allclose(S.surrogate_grad(x, 2.0),
                               1.0 / (1.0 + (math.pi * x) ** 2), atol=1e-15)
    for alpha in (0.5, 1.0, 2.0, 4.0):
        assert abs(S.surrogate_grad(np.array(0.0), alpha) - alpha / 2.0) < 1e-15


def test_surrogate_grad_matches_finite_differences():
    h = 1e-6
    for alpha in (0.5, 1.0, 2.0, 4.0):
        x = np.linspace(-5.0, 5.0, 201)
        fd = (S.surrogate_step(x + h, alpha) - S.surrogate_step(x - h, alpha)) / (2 * h)
        np.testing.assert_allclose(S.surrogate_grad(x, alpha), fd, atol=1e-7)


def test_lif_charge_rule():
    cfg = S.NeuronConfig(kind="lif", tau_m=4.0, v_rest=0.25)
    v = Tensor([0.5, 1.0])
    i = Tensor([2.0, 0.0])
    q = S.lif_charge(v, i, cfg)
    want = v.values + 0.25 * (-(v.values - 0.25) + i.values)
    np.testing.assert_allclose(q.values, want, atol=1e-15)


def test_plif_equals_lif_with_matching_tau():
    rng = np.random.default_rng(41)
    a_val = 0.7
    tau = S.tau_of(a_val)
    plif_cfg = S.NeuronConfig(kind="plif", v_rest=0.1)
    lif_cfg = S.NeuronConfig(kind="lif", tau_m=tau, v_rest=0.1)
    v = Tensor(rng.normal(size=(3, 4)))
    i = Tensor(rng.normal(size=(3, 4)))
    a = Tensor(np.array(a_val))
    np.testing.assert_allclose(S.plif_charge(v, i, a, plif_cfg).values,
                               S.lif_charge(v, i, lif_cfg).values, atol=1e-14)


def test_charge_gradients_match_fd():
    rng = np.random.default_rng(43)
    cfg = S.NeuronConfig(kind="plif", v_rest=0.2)
    v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    i = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    a = Tensor(np.array(0.3), requires_grad=True)
    weights = Tensor(rng.normal(size=(2, 3)))

    def build():
        return tensor_sum(S.plif_charge(v, i, a, cfg) * weights)

    with Tape():
        loss = build()
    backward(loss)
    for p in (v, i, a):
        fd = finite_diff(lambda: build().item(), p.values)
        np.testing.assert_allclose(p.grad, fd, rtol=1e-6, atol=1e-8)

    lif_cfg = S.NeuronConfig(kind="lif", tau_m=3.0)
    v2 = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def build_lif():
        return tensor_sum(S.lif_charge(v2, i, lif_cfg) * weights)

    with Tape():
        loss = build_lif()
    backward(loss)
    fd = finite_diff(lambda: build_lif().item(), v2.values)
    np.testing.assert_allclose(v2.grad, fd, rtol=1e-6, atol=1e-8)


def test_fire_hard_forward_surrogate_backward():
    cfg = S.NeuronConfig(alpha=2.0)
    q = Tensor([0.0, 0.5, 1.0, 1.5], requires_grad=True)
    with Tape():
        spikes = S.fire(q, cfg)
        loss = tensor_sum(spikes * Tensor([1.0, 2.0, 3.0, 4.0]))
    assert np.array_equal(spikes.values, [0.0, 0.0, 1.0, 1.0])  # threshold at 1
    backward(loss)
    want = np.array([1.0, 2.0, 3.0, 4.0]) * S.surrogate_grad(q.values - 1.0, 2.0)
    np.testing.assert_allclose(q.grad, want, atol=1e-15)


def test_fire_soft_mode_is_smooth_step():
    cfg = S.NeuronConfig(alpha=2.0)
    q = Tensor([0.3, 1.0, 1.7])
    soft = S.fire(q, cfg, soft=True)
    np.testing.assert_allclose(soft.values,
                               S.surrogate_step(q.values - 1.0, 2.0), atol=1e-15)


def test_reset_formula_and_binary_check():
    cfg = S.NeuronConfig(v_rest=0.25)
    q = Tensor([0.4, 1.3])
    good = S.reset(q, Tensor([0.0, 1.0]), cfg)
    np.testing.assert_allclose(good.values, [0.4, 0.25], atol=1e-15)
    with pytest.raises(ValueError, match="binary"):
        S.reset(q, Tensor([0.0, 0.5]), cfg)
    # graded spikes allowed in soft mode
    S.reset(q, Tensor([0.0, 0.5]), cfg, soft=True)


def test_reset_gradient_flows_through_both_factors():
    cfg = S.NeuronConfig(v_rest=0.5)
    q = Tensor([2.0], requires_grad=True)
    o = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = tensor_sum(S.reset(q, o, cfg))
    backward(loss)
    assert q.grad[0] == 0.0  # 1 - o
    assert o.grad[0] == 0.5 - 2.0  # v_rest - q


def test_step_scan_matches_loop_simulation():
    rng = np.random.default_rng(47)
    cfg = S.NeuronConfig(kind="lif", tau_m=2.0, v_threshold=1.0, v_rest=0.0)
    inputs = rng.uniform(0.0, 2.5, size=(6, 4, 3))  # (T, batch, features)
    state = S.init_state(cfg, (4, 3))
    got = []
    for t in range(6):
        spikes, state = S.step(state, Tensor(inputs[t]), cfg)
        got.append(spikes.values)
    want = lif_simulate(inputs, v_start=0.0, tau_m=2.0, v_th=1.0, v_rest=0.0)
    np.testing.assert_array_equal(np.stack(got), want)


def test_step_requires_leak_for_plif():
    cfg = S.NeuronConfig(kind="plif")
    state = S.init_state(cfg, (1, 2))
    with pytest.raises(ValueError, match="leak"):
        S.step(state, Tensor(np.ones((1, 2))), cfg)


def test_bptt_through_time_matches_fd_in_soft_mode():
    rng = np.random.default_rng(53)
    cfg = S.NeuronConfig(kind="plif", v_rest=0.0)
    inputs = rng.uniform(0.4, 1.6, size=(5, 2, 3))
    a = Tensor(np.array(0.1), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)) * 0.5, requires_grad=True)

    def build():
        state = S.init_state(cfg, (2, 3))
        total = None
        for t in range(5):
            drive = Tensor(inputs[t]) @ w
            spikes, state = S.step(state, drive, cfg, a=a, soft=True)
            part = tensor_sum(spikes)
            total = part if total is None else total + part
        return total

    with Tape():
        loss = build()
    backward(loss)
    for p in (a, w):
        fd = finite_diff(lambda: build().item(), p.values, h=1e-6)
        np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-7)


def test_spike_train_shape_and_rate():
    with pytest.raises(ValueError):
        S.SpikeTrain(np.zeros((2, 3)))
    train = S.SpikeTrain(np.array([[[1.0, 0.0]], [[1.0, 1.0]]]))
    assert train.timesteps == 2
    np.testing.assert_allclose(train.rate(), [[1.0, 0.5]])
