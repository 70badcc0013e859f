import math

import numpy as np
import pytest

from feddsr import ops
from feddsr.errors import DataError, DimensionError
from feddsr.gradcheck import finite_diff_check, gradient_check
from feddsr.tensor import GradientTape, Tensor, precision


def naive_conv(x, k, b, stride, pad):
    bsz, c, h, w = x.shape
    co, _, kk, _ = k.shape
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    xp = np.zeros((bsz, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    out = np.zeros((bsz, co, ho, wo))
    for n in range(bsz):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kk):
                            for v in range(kk):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    out[n, o, i, j] = acc
    return out


# ---- conv2d ----

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1).data
    np.testing.assert_array_equal(out, x)


def test_conv_overlap_counts():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), 1, 1).data
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_naive_loops(rng, stride):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with precision("double"):
        out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, 1).data
    np.testing.assert_allclose(out, naive_conv(x, k, b, stride, 1), atol=1e-6, rtol=0)


def test_conv_single_precision_matches_naive(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv(x, k, b, 1, 1), atol=1e-5)


def test_conv_output_extent_formula(rng):
    x = Tensor(rng.normal(size=(1, 2, 7, 5)))
    out = ops.conv2d(x, Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3)), stride=2, pad=1)
    assert out.shape == (1, 3, (7 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1)


def test_conv_channel_mismatch_names_axis(rng):
    with pytest.raises(DimensionError, match="C"):
        ops.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(3, 5, 3, 3))), Tensor(np.zeros(3)))


def test_conv_even_kernel_rejected(rng):
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(rng.normal(size=(1, 1, 4, 4))), Tensor(rng.normal(size=(1, 1, 2, 2))), Tensor(np.zeros(1)))


def test_conv_gradients(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        err = finite_diff_check(lambda: ops.tsum(ops.mul(ops.conv2d(x, k, b, stride=2), w)), [x, k, b])
    assert err < 1e-7


# ---- dense ----

def test_dense_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ops.dense(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data
    np.testing.assert_array_equal(out, x)


def test_dense_hand_case():
    out = ops.dense(Tensor([[1.0, 2.0]]), Tensor(3 * np.eye(2)), Tensor([1.0, 1.0])).data
    np.testing.assert_array_equal(out, [[4.0, 7.0]])


def test_dense_matches_triple_loop(rng):
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2)), rng.normal(size=2)
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            ref[i, j] = b[j] + sum(x[i, f] * w[f, j] for f in range(5))
    with precision("double"):
        out = ops.dense(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_dense_dimension_error():
    with pytest.raises(DimensionError):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


def test_dense_gradients(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        m = Tensor(rng.normal(size=(3, 2)))
        assert finite_diff_check(lambda: ops.tsum(ops.mul(ops.dense(x, w, b), m)), [x, w, b]) < 1e-8


# ---- elementwise / resampling ----

def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_relu_subgradient_zero_at_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with GradientTape() as tape:
        loss = ops.tsum(ops.relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_kink_excluded_from_check():
    with precision("double"):
        x = Tensor([0.0, 1.5, -2.0], requires_grad=True)
        res = gradient_check(lambda: ops.tsum(ops.relu(x)), [x])
    assert res.skipped == 1
    assert res.checked == 2
    assert res.max_rel_error < 1e-9


def test_maxpool_values():
    out = ops.maxpool2x2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data
    np.testing.assert_array_equal(out, [[[[4.0]]]])


def test_maxpool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        ops.maxpool2x2(Tensor(np.ones((1, 1, 3, 4))))


def test_upsample_values():
    out = ops.upsample_nearest2x(Tensor(np.array([[[[5.0]]]]))).data
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 5.0))


def test_pool_and_upsample_gradients(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        m = Tensor(rng.normal(size=(2, 2, 4, 4)))
        f = lambda: ops.tsum(ops.mul(ops.upsample_nearest2x(ops.maxpool2x2(x)), m))
        assert finite_diff_check(f, [x]) < 1e-8


# ---- softmax ----

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax_channels(Tensor(np.zeros((1, 4, 2, 2)))).data, 0.25)


def test_softmax_stable_for_large_logits():
    p = ops.softmax_channels(Tensor(np.full((1, 2, 1, 1), 1000.0))).data
    np.testing.assert_allclose(p.ravel(), [0.5, 0.5])


def test_softmax_closed_form():
    with precision("double"):
        p = ops.softmax_channels(Tensor(np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1))).data
    np.testing.assert_allclose(p.ravel(), [0.25, 0.75], rtol=1e-12)


def test_softmax_is_distribution(rng):
    p = ops.softmax_channels(Tensor(rng.normal(size=(3, 6, 5, 5)) * 20)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_gradients(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        m = Tensor(rng.normal(size=(2, 3, 2, 2)))
        assert finite_diff_check(lambda: ops.tsum(ops.mul(ops.softmax_channels(x), m)), [x]) < 1e-8


# ---- per-pixel losses ----

def test_nll_ignores_label_255():
    p = np.full((1, 2, 1, 2), 0.5)
    p[0, :, 0, 1] = [0.9, 0.1]
    labels = np.array([[[0, 255]]])
    with precision("double"):
        v = ops.nll_probs(Tensor(p), labels).data
    assert float(v) == pytest.approx(math.log(2))


def test_nll_label_out_of_range_names_sample():
    p = np.full((2, 3, 1, 1), 1 / 3)
    with pytest.raises(DataError, match="sample 1"):
        ops.nll_probs(Tensor(p), np.array([[[0]], [[3]]]))


def test_nll_clamps_zero_probability():
    p = np.zeros((1, 2, 1, 1))
    p[0, 1] = 1.0
    v = float(ops.nll_probs(Tensor(p), np.zeros((1, 1, 1), dtype=np.int64)).data)
    assert v == pytest.approx(-math.log(1e-12), rel=1e-6)


def test_neg_entropy_gradients(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(2, 4, 2, 2)), requires_grad=True)
        assert finite_diff_check(lambda: ops.neg_entropy(ops.softmax_channels(x)), [x]) < 1e-8


def test_channel_prefix(rng):
    with precision("double"):
        x = Tensor(rng.normal(size=(1, 4, 2, 2)), requires_grad=True)
        np.testing.assert_array_equal(ops.channel_prefix(x, 2).data, x.data[:, :2])
        assert finite_diff_check(lambda: ops.neg_entropy(ops.softmax_channels(ops.channel_prefix(x, 2))), [x]) < 1e-8
