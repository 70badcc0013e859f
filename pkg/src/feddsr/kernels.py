"""Hot array kernels behind the tensor ops.

Every kernel exists twice: a pure-numpy version (``*_np``) and a loop
version compiled with numba (``*_jit``).  The module-level names
(``im2col``, ``col2im``, ...) point at the numba versions unless numba is
unavailable or disabled with ``FEDDSR_NO_NUMBA=1``.  Channel softmax always
uses numpy, which is faster here.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USING_NUMBA, jit


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def im2col_np(x, k, stride, pad, ho, wo):
    """Patch matrix [C*k*k, B*Ho*Wo] of a zero-padded input [B,C,H,W]."""
    b, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [B, C, Ho, Wo, k, k] -> [C, k, k, B, Ho, Wo]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * ho * wo)


def col2im_np(cols, b, c, h, w, k, stride, pad, ho, wo):
    """Adjoint of im2col_np: scatter-add patches back to [B,C,H,W]."""
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    d6 = cols.reshape(c, k, k, b, ho, wo)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += \
                d6[:, di, dj].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w]) if pad else dxp


def _pool_windows(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)


def maxpool_fwd_np(x):
    win = _pool_windows(x)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool_bwd_np(dout, idx):
    b, c, ho, wo = dout.shape
    win = np.zeros((b, c, ho, wo, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    return win.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * 2, wo * 2)


def softmax_channels_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

@jit
def im2col_jit(x, k, stride, pad, ho, wo):
    b, c, h, w = x.shape
    cols = np.zeros((c * k * k, b * ho * wo), dtype=x.dtype)
    for ch in range(c):
        for di in range(k):
            for dj in range(k):
                row = (ch * k + di) * k + dj
                for n in range(b):
                    for i in range(ho):
                        y = i * stride + di - pad
                        if y < 0 or y >= h:
                            continue
                        base = (n * ho + i) * wo
                        for j in range(wo):
                            xx = j * stride + dj - pad
                            if 0 <= xx < w:
                                cols[row, base + j] = x[n, ch, y, xx]
    return cols


@jit
def col2im_jit(cols, b, c, h, w, k, stride, pad, ho, wo):
    dx = np.zeros((b, c, h, w), dtype=cols.dtype)
    for ch in range(c):
        for di in range(k):
            for dj in range(k):
                row = (ch * k + di) * k + dj
                for n in range(b):
                    for i in range(ho):
                        y = i * stride + di - pad
                        if y < 0 or y >= h:
                            continue
                        base = (n * ho + i) * wo
                        for j in range(wo):
                            xx = j * stride + dj - pad
                            if 0 <= xx < w:
                                dx[n, ch, y, xx] += cols[row, base + j]
    return dx


@jit
def maxpool_fwd_jit(x):
    b, c, h, w = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((b, c, ho, wo), dtype=x.dtype)
    idx = np.empty((b, c, ho, wo), dtype=np.int8)
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    # window order matches the numpy path: (0,0) (0,1) (1,0) (1,1), first max wins
                    best = x[n, ch, 2 * i, 2 * j]
                    arg = 0
                    v = x[n, ch, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        arg = 1
                    v = x[n, ch, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        arg = 2
                    v = x[n, ch, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        arg = 3
                    out[n, ch, i, j] = best
                    idx[n, ch, i, j] = arg
    return out, idx


@jit
def maxpool_bwd_jit(dout, idx):
    b, c, ho, wo = dout.shape
    dx = np.zeros((b, c, 2 * ho, 2 * wo), dtype=dout.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = idx[n, ch, i, j]
                    dx[n, ch, 2 * i + a // 2, 2 * j + a % 2] = dout[n, ch, i, j]
    return dx


@jit
def softmax_channels_jit(x):
    # sweeps whole contiguous planes per channel so the inner loop vectorizes
    b, c, h, w = x.shape
    out = np.empty_like(x)
    m = np.empty((h, w), dtype=x.dtype)
    s = np.empty((h, w), dtype=x.dtype)
    for n in range(b):
        m[:, :] = x[n, 0]
        for ch in range(1, c):
            for i in range(h):
                for j in range(w):
                    if x[n, ch, i, j] > m[i, j]:
                        m[i, j] = x[n, ch, i, j]
        s[:, :] = 0
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    e = np.exp(x[n, ch, i, j] - m[i, j])
                    out[n, ch, i, j] = e
                    s[i, j] += e
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    out[n, ch, i, j] /= s[i, j]
    return out

if USING_NUMBA:
    im2col = im2col_jit
    col2im = col2im_jit
    maxpool_fwd = maxpool_fwd_jit
    maxpool_bwd = maxpool_bwd_jit
else:
    im2col = im2col_np
    col2im = col2im_np
    maxpool_fwd = maxpool_fwd_np
    maxpool_bwd = maxpool_bwd_np
# numpy's vectorized exp beats the compiled scalar loop (see benchmarks/)
softmax_channels = softmax_channels_np

BACKEND = "numba" if USING_NUMBA else "numpy"
