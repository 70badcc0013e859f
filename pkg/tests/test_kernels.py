"""The numba and numpy kernel paths agree with each other and with loops."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from feddsr import kernels


def naive_im2col(x, k, stride, pad, ho, wo):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c * k * k, b * ho * wo), dtype=x.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                col = (n * ho + i) * wo + j
                out[:, col] = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k].ravel()
    return out


shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
                   st.sampled_from([1, 3]), st.sampled_from([1, 2]))


@given(shapes, st.integers(0, 2**31 - 1))
def test_im2col_paths_match_loop(shape, seed):
    b, c, h, w, k, stride = shape
    pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x = np.random.default_rng(seed).normal(size=(b, c, h, w))
    ref = naive_im2col(x, k, stride, pad, ho, wo)
    np.testing.assert_array_equal(kernels.im2col_np(x, k, stride, pad, ho, wo), ref)
    np.testing.assert_array_equal(kernels.im2col_jit(x, k, stride, pad, ho, wo), ref)


@given(shapes, st.integers(0, 2**31 - 1))
def test_col2im_is_adjoint_of_im2col(shape, seed):
    b, c, h, w, k, stride = shape
    pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, c, h, w))
    cols = rng.normal(size=(c * k * k, b * ho * wo))
    lhs = np.sum(naive_im2col(x, k, stride, pad, ho, wo) * cols)
    for f in (kernels.col2im_np, kernels.col2im_jit):
        dx = f(cols, b, c, h, w, k, stride, pad, ho, wo)
        assert dx.shape == x.shape
        assert np.sum(x * dx) == pytest.approx(lhs, rel=1e-10, abs=1e-10)


def test_maxpool_paths_agree_and_first_max_wins():
    x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
    for fwd in (kernels.maxpool_fwd_np, kernels.maxpool_fwd_jit):
        out, idx = fwd(x)
        assert out[0, 0, 0, 0] == 1.0
        assert idx[0, 0, 0, 0] == 0
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 4))
    a, ia = kernels.maxpool_fwd_np(x)
    b, ib = kernels.maxpool_fwd_jit(x)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ia, ib)
    d = rng.normal(size=a.shape)
    np.testing.assert_array_equal(kernels.maxpool_bwd_np(d, ia), kernels.maxpool_bwd_jit(d, ib))


def test_maxpool_matches_loop():
    x = np.random.default_rng(4).normal(size=(2, 2, 4, 6))
    out, _ = kernels.maxpool_fwd(x)
    for n in range(2):
        for c in range(2):
            for i in range(2):
                for j in range(3):
                    assert out[n, c, i, j] == x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()


def test_softmax_paths_agree():
    x = np.random.default_rng(5).normal(size=(3, 5, 4, 4)) * 10
    np.testing.assert_allclose(kernels.softmax_channels_np(x), kernels.softmax_channels_jit(x), rtol=1e-12)
    x32 = x.astype(np.float32)
    assert kernels.softmax_channels_jit(x32).dtype == np.float32


def test_backend_flag():
    assert kernels.BACKEND in ("numba", "numpy")
