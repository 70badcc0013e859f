"""Differentiable tensor operations.

Each op computes its forward value with numpy (or a numba kernel) and, when
a tape is active and some input requires grad, records a closure mapping
the output gradient to input gradients.  Shapes are explicit: the only
broadcast is the bias add inside ``conv2d`` and ``dense``.
"""
import os

import numpy as np

from . import kernels
from .errors import DataError, DimensionError, NonFiniteError
from .tensor import Tensor, active_tape

LOG_EPS = 1e-12
IGNORE_LABEL = 255

# Non-finite values propagate into every loss, so by default only scalar
# outputs are checked; FEDDSR_CHECK_FINITE=1 checks every op.
CHECK_ALL_FINITE = os.environ.get("FEDDSR_CHECK_FINITE", "") == "1"


def _out(op, data, inputs, backward, dtype):
    if (CHECK_ALL_FINITE or data.ndim == 0) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=dtype)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward)
    return out


def _note_kink(op, pattern):
    tape = active_tape()
    if tape is not None:
        tape.note_kink(op, pattern)


def _check_ndim(op, t, ndim, axes):
    if t.data.ndim != ndim:
        raise DimensionError(f"{op}: expected {ndim}-d tensor [{', '.join(axes)}], got shape {list(t.shape)}")


# --------------------------------------------------------------------------
# linear maps
# --------------------------------------------------------------------------

def conv2d(x, kernel, bias, stride=1, pad=None):
    """2-d cross-correlation of ``x`` [B,C,H,W] with ``kernel`` [Co,C,k,k].

    ``pad=None`` means "same" padding, (k-1)/2.
    """
    _check_ndim("conv2d", x, 4, ("B", "C", "H", "W"))
    _check_ndim("conv2d kernel", kernel, 4, ("Co", "C", "k", "k"))
    b, c, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channel axis C={c} does not match kernel axis 1 (C={ck})")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial axes must be equal and odd, got k_h={kh}, k_w={kw}")
    if bias.shape != (co,):
        raise DimensionError(f"conv2d: bias axis 0 must equal kernel axis 0 (Co={co}), got shape {list(bias.shape)}")
    if stride not in (1, 2):
        raise DimensionError(f"conv2d: stride must be 1 or 2, got {stride}")
    k = kh
    if pad is None:
        pad = (k - 1) // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: spatial axes H={h}, W={w} too small for k={k}, pad={pad}")

    xd = x.data
    wm = kernel.data.reshape(co, c * k * k)
    pointwise = k == 1 and stride == 1 and pad == 0
    # patch matrix laid out [C*k*k, B*Ho*Wo]
    if pointwise:
        cols = xd.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    else:
        cols = kernels.im2col(xd, k, stride, pad, ho, wo)
    out2 = wm @ cols
    out2 += bias.data[:, None]
    out = np.ascontiguousarray(out2.reshape(co, b, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, b * ho * wo)
        dk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        db = g2.sum(axis=1) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = wm.T @ g2
            if pointwise:
                dx = np.ascontiguousarray(dcols.reshape(c, b, h, w).transpose(1, 0, 2, 3))
            else:
                dx = kernels.col2im(dcols, b, c, h, w, k, stride, pad, ho, wo)
        return dx, dk, db

    return _out("conv2d", out, (x, kernel, bias), backward, xd.dtype)


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for x [B,F], weight [F,G], bias [G]."""
    _check_ndim("dense", x, 2, ("B", "F"))
    _check_ndim("dense weight", weight, 2, ("F", "G"))
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input axis F={x.shape[1]} does not match weight axis 0 ({weight.shape[0]})")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias must have shape [{weight.shape[1]}], got {list(bias.shape)}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _out("dense", out, (x, weight, bias), backward, x.dtype)


# --------------------------------------------------------------------------
# elementwise / resampling
# --------------------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    _note_kink("relu", mask)
    out = np.maximum(x.data, x.dtype.type(0))  # propagates NaN, unlike a masked select

    def backward(g):
        # subgradient 0 at exactly 0
        return (g * mask,)

    return _out("relu", out, (x,), backward, x.dtype)


def maxpool2x2(x):
    _check_ndim("maxpool2x2", x, 4, ("B", "C", "H", "W"))
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2: spatial axes must be even, got H={h}, W={w}")
    out, idx = kernels.maxpool_fwd(x.data)
    _note_kink("maxpool2x2", idx)

    def backward(g):
        return (kernels.maxpool_bwd(np.ascontiguousarray(g), idx),)

    return _out("maxpool2x2", out, (x,), backward, x.dtype)


def upsample_nearest2x(x):
    _check_ndim("upsample_nearest2x", x, 4, ("B", "C", "H", "W"))
    b, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _out("upsample_nearest2x", out, (x,), backward, x.dtype)


def softmax_channels(x):
    """Per-pixel softmax over axis 1 of a [B,C,H,W] tensor."""
    _check_ndim("softmax_channels", x, 4, ("B", "C", "H", "W"))
    if x.shape[1] < 1:
        raise DimensionError("softmax_channels: channel axis C must be >= 1")
    p = kernels.softmax_channels(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _out("softmax_channels", p, (x,), backward, x.dtype)


def channel_prefix(x, count):
    """First ``count`` channels of a [B,C,H,W] tensor."""
    c = x.shape[1]
    if count == c:
        return x
    if not 1 <= count <= c:
        raise DimensionError(f"channel_prefix: count {count} outside [1, C={c}]")
    out = np.ascontiguousarray(x.data[:, :count])

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :count] = g
        return (dx,)

    return _out("channel_prefix", out, (x,), backward, x.dtype)


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    return _out("add", a.data + b.data, (a, b), lambda g: (g, g), a.dtype)


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {list(a.shape)} and {list(b.shape)} differ")
    ad, bd = a.data, b.data
    return _out("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad), a.dtype)


def scale(a, s):
    s = a.dtype.type(s)
    return _out("scale", a.data * s, (a,), lambda g: (g * s,), a.dtype)


def tsum(a):
    shape = a.shape
    dtype = a.dtype
    return _out("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                lambda g: (np.full(shape, g, dtype=dtype),), dtype)


# --------------------------------------------------------------------------
# losses over per-pixel distributions
# --------------------------------------------------------------------------

def nll_probs(probs, labels, ignore_label=IGNORE_LABEL):
    """Mean over labelled pixels of -log(max(p[true], 1e-12)).

    ``probs`` is [B,K,H,W]; ``labels`` is an integer array [B,H,W].  Pixels
    carrying ``ignore_label`` are left out of the mean.
    """
    _check_ndim("nll_probs", probs, 4, ("B", "K", "H", "W"))
    b, k, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (b, h, w):
        raise DimensionError(f"nll_probs: labels shape {list(labels.shape)} does not match [B,H,W]={[b, h, w]}")
    lab = labels.astype(np.int64)
    valid = lab != ignore_label
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        sample = int(np.argwhere(bad)[0][0])
        raise DataError(f"label out of range [0,{k}) in sample {sample}: {int(lab[bad][0])}")
    safe = np.where(valid, lab, 0)
    p_true = np.take_along_axis(probs.data, safe[:, None], axis=1)[:, 0]
    live = valid & (p_true > LOG_EPS)
    _note_kink("clamp", live)
    n = int(valid.sum())
    dtype = probs.dtype
    if n == 0:
        value = np.asarray(0.0, dtype=dtype)
    else:
        logs = np.log(np.maximum(p_true, LOG_EPS).astype(np.float64))
        value = np.asarray(-logs[valid].sum() / n, dtype=dtype)

    def backward(g):
        dp = np.zeros_like(probs.data)
        if n:
            d_true = np.where(live, -1.0 / (np.maximum(p_true, LOG_EPS) * n), 0.0) * g
            np.put_along_axis(dp, safe[:, None], d_true[:, None].astype(dtype), axis=1)
        return (dp,)

    return _out("nll_probs", value, (probs,), backward, dtype)


def neg_entropy(probs):
    """Mean over batch and pixels of sum_c p_c log(max(p_c, 1e-12))."""
    _check_ndim("neg_entropy", probs, 4, ("B", "C", "H", "W"))
    b, _, h, w = probs.shape
    n = b * h * w
    p = probs.data
    live = p > LOG_EPS
    _note_kink("clamp", live)
    logp = np.log(np.maximum(p, LOG_EPS).astype(np.float64))
    value = np.asarray((p * logp).sum() / n, dtype=probs.dtype)

    def backward(g):
        d = np.where(live, logp + 1.0, np.log(LOG_EPS)) * (g / n)
        return (d.astype(probs.dtype),)

    return _out("neg_entropy", value, (probs,), backward, probs.dtype)
