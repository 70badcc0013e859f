import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from feddsr import ops
from feddsr.errors import ContractError, DataError
from feddsr.gradcheck import gradient_check
from feddsr.model import build_adapters, build_network
from feddsr.objectives import LossWeights, ce_loss, mi_loss, ne_reg, objective, total_loss
from feddsr.tensor import GradientTape, Tensor, precision


def test_ce_zero_when_true_class_certain():
    labels = np.array([[[0, 1], [2, 1]]])
    logits = np.zeros((1, 3, 2, 2))
    np.put_along_axis(logits, labels[:, None], 1000.0, axis=1)
    assert float(ce_loss(Tensor(logits), labels).data) == 0.0


def test_ce_uniform_is_log_k():
    v = float(ce_loss(Tensor(np.zeros((2, 4, 3, 3))), np.zeros((2, 3, 3), dtype=np.uint8)).data)
    assert v == pytest.approx(1.386294, abs=1e-6)


def test_ce_matches_scalar_loop(rng):
    logits = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    total = 0.0
    for b in range(2):
        for i in range(4):
            for j in range(4):
                z = logits[b, :, i, j]
                p = math.exp(z[labels[b, i, j]]) / sum(math.exp(v) for v in z)
                total -= math.log(p)
    with precision("double"):
        v = float(ce_loss(Tensor(logits), labels).data)
    assert v == pytest.approx(total / 32, abs=1e-6)


def test_ce_label_out_of_range():
    with pytest.raises(DataError, match="sample 0"):
        ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 5))


def test_mi_certain_and_uniform():
    labels = np.array([[[1, 0]]])
    q = np.zeros((1, 4, 1, 2))
    np.put_along_axis(q, labels[:, None], 1.0, axis=1)
    assert float(mi_loss(Tensor(q), labels).data) == 0.0
    v = float(mi_loss(Tensor(np.full((1, 4, 1, 2), 0.25)), labels).data)
    assert v == pytest.approx(1.386294, abs=1e-6)


def test_mi_equals_ce_on_log_distribution(rng):
    with precision("double"):
        q = ops.softmax_channels(Tensor(rng.normal(size=(2, 3, 4, 4)))).data
        labels = rng.integers(0, 3, size=(2, 4, 4))
        a = float(mi_loss(Tensor(q), labels).data)
        b = float(ce_loss(Tensor(np.log(q)), labels).data)
    assert a == pytest.approx(b, abs=1e-6)


def test_ne_uniform_eight_channels():
    assert float(ne_reg(Tensor(np.zeros((2, 8, 3, 3)))).data) == pytest.approx(-2.079442, abs=1e-6)


def test_ne_one_hot_limit():
    z = np.zeros((1, 4, 2, 2))
    z[:, 0] = 1000.0
    v = float(ne_reg(Tensor(z)).data)
    assert -1e-9 <= v <= 0.0


def test_ne_closed_form_two_channels():
    with precision("double"):
        z = np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1)
        assert float(ne_reg(Tensor(z)).data) == pytest.approx(-0.562335, abs=1e-6)


def test_ne_channel_prefix():
    z = np.zeros((1, 8, 2, 2))
    assert float(ne_reg(Tensor(z), channels=2).data) == pytest.approx(-math.log(2), abs=1e-6)


@given(arrays(np.float64, (2, 5, 2, 2), elements=st.floats(-50, 50)))
def test_ne_bounds(z):
    with precision("double"):
        v = float(ne_reg(Tensor(z)).data)
    assert -math.log(5) - 1e-9 <= v <= 1e-9


def test_total_zero_weights_equals_ce():
    w = LossWeights([0.0, 0.0], [0.0, 0.0])
    ce = Tensor(1.2345)
    lb = total_loss(ce, [0.7, 0.2], [-1.0, -2.0], w)
    assert lb.total == lb.ce
    assert lb.tensor is ce


def test_total_hand_case():
    lb = total_loss(1.0, [0.5], [-2.0], LossWeights([0.4], [0.1]))
    assert lb.total == pytest.approx(1.0, abs=1e-6)


def test_total_length_mismatch():
    with pytest.raises(ContractError):
        total_loss(1.0, [0.5, 0.1], [-2.0], LossWeights([0.4], [0.1]))


def test_total_linear_in_alpha():
    with precision("double"):
        a = total_loss(1.0, [0.5], [-2.0], LossWeights([0.4], [0.0])).total - 1.0
        b = total_loss(1.0, [0.5], [-2.0], LossWeights([0.8], [0.0])).total - 1.0
    assert b == 2 * a


def test_negative_weights_rejected():
    with pytest.raises(ContractError):
        LossWeights([-0.1], [0.1])


def tiny_setup(rng, alpha, lam, hidden=False):
    net = build_network(3, 2, 3, 0)
    taps = (1, 3)
    ads = build_adapters(net, taps, 0, hidden)
    x = Tensor(rng.uniform(size=(2, 3, 4, 4)))
    y = rng.integers(0, 3, size=(2, 4, 4))
    w = LossWeights.uniform(2, alpha, lam)
    return net, ads, taps, x, y, w


def test_breakdown_invariant(rng):
    net, ads, taps, x, y, w = tiny_setup(rng, 0.4, 0.1)
    lb = objective(net, ads, taps, x, y, w)
    expect = lb.ce + sum(0.4 * m + 0.1 * n for m, n in zip(lb.mi, lb.ne))
    assert lb.total == pytest.approx(expect, abs=1e-6)
    assert lb.ce >= 0 and all(m >= 0 for m in lb.mi)
    assert all(-math.log(c) - 1e-6 <= n <= 0 for n, c in zip(lb.ne, (2, 4)))


def test_adapter_gradient_only_through_mi(rng):
    with precision("double"):
        net, ads, taps, x, y, w = tiny_setup(rng, 0.0, 0.5)
        phi = [p for a in ads for p in a.parameters()]
        with GradientTape() as tape:
            lb = objective(net, ads, taps, x, y, w)
        grads = tape.backward(lb.tensor, phi)
        assert all(not g.any() for g in grads)
        # finite differences agree that the objective is flat in phi
        res = gradient_check(lambda: objective(net, ads, taps, x, y, w).tensor, phi)
        assert res.max_rel_error < 1e-9
        w2 = LossWeights.uniform(2, 0.4, 0.5)
        with GradientTape() as tape:
            lb = objective(net, ads, taps, x, y, w2)
        assert any(g.any() for g in tape.backward(lb.tensor, phi))


def tap_entropy_after_training(lam, steps=30, lr=0.5):
    rng = np.random.default_rng(0)
    with precision("double"):
        net = build_network(3, 2, 3, 0)
        taps = (1,)
        ads = build_adapters(net, taps, 0)
        x = Tensor(rng.uniform(size=(4, 3, 8, 8)))
        y = rng.integers(0, 3, size=(4, 8, 8))
        w = LossWeights([0.0], [lam])
        params = net.parameters()
        for _ in range(steps):
            with GradientTape() as tape:
                lb = objective(net, ads, taps, x, y, w)
            for p, g in zip(params, tape.backward(lb.tensor, params)):
                p.data = p.data - lr * g
        from feddsr.model import forward_with_taps
        _, (z,) = forward_with_taps(net, taps, x)
        return -float(ops.neg_entropy(ops.softmax_channels(z)).data)


def test_entropy_monotone_in_lambda():
    ents = [tap_entropy_after_training(lam) for lam in (0.0, 0.5, 2.0)]
    assert ents[0] < ents[1] < ents[2]
