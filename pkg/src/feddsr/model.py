"""Tiny encoder-decoder segmentation network with intermediate tap points.

Block list (C = base width)::

    0 enc1        conv3x3 Cin->C  + relu     H
    1 pool1       maxpool 2x2                H/2
    2 enc2        conv3x3 C->2C   + relu     H/2
    3 pool2       maxpool 2x2                H/4
    4 bottleneck  conv3x3 2C->4C  + relu     H/4
    5 dec1        up2x, conv3x3 4C->2C + relu  H/2
    6 dec2        up2x, conv3x3 2C->C  + relu  H
    7 head        conv1x1 C->K               H

A tap site ``i`` is the output of block ``i``; the head output is never a
site, so the candidate boundaries are 0..6.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import RngStream, Tensor, get_dtype

BLOCKS = ("enc1", "pool1", "enc2", "pool2", "bottleneck", "dec1", "dec2", "head")
SITES = tuple(range(len(BLOCKS) - 1))
DOWNSAMPLE_SITES = (1, 3)
BOTTLENECK_SITES = (4,)
TAP_RULES = ("after-downsample", "between-blocks", "bottleneck", "explicit-indices")
POSITIONS = ("input", "central", "output")

# stream keys for RngStream.child
_NET_STREAM = 1
_ADAPTER_STREAM = 2


def param_count(cin, width, classes):
    c = width
    convs = [(cin, c, 3), (c, 2 * c, 3), (2 * c, 4 * c, 3), (4 * c, 2 * c, 3), (2 * c, c, 3), (c, classes, 1)]
    return sum(ci * co * k * k + co for ci, co, k in convs)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


@dataclass
class SegNet:
    in_channels: int
    width: int
    classes: int
    params: dict = field(repr=False)

    def site_channels(self, site):
        c = self.width
        return (c, c, 2 * c, 2 * c, 4 * c, 2 * c, c)[site]

    @staticmethod
    def site_scale(site):
        """Downsampling factor of a site relative to the input."""
        return (1, 2, 2, 4, 4, 2, 1)[site]

    def parameters(self):
        return list(self.params.values())

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state):
        for k, t in self.params.items():
            arr = state[k]
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {list(arr.shape)} != {list(t.shape)}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)
            t.grad = None

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())


def build_network(in_channels, width, classes, seed, dtype=None):
    if in_channels < 1:
        raise ConfigError(f"model.in_channels must be >= 1, got {in_channels}")
    if width < 2:
        raise ConfigError(f"model.width must be >= 2, got {width}")
    if classes < 2:
        raise ConfigError(f"model.classes must be >= 2, got {classes}")
    dtype = dtype or get_dtype()
    rng = RngStream(seed, _NET_STREAM)
    c = width
    layout = [("enc1", in_channels, c, 3), ("enc2", c, 2 * c, 3), ("bottleneck", 2 * c, 4 * c, 3),
              ("dec1", 4 * c, 2 * c, 3), ("dec2", 2 * c, c, 3), ("head", c, classes, 1)]
    params = {}
    for name, ci, co, k in layout:
        params[f"{name}.w"] = Tensor(_he(rng, (co, ci, k, k)), requires_grad=True, name=f"{name}.w", dtype=dtype)
        params[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True, name=f"{name}.b", dtype=dtype)
    return SegNet(in_channels, width, classes, params)


@dataclass
class TapSpec:
    rule: str = "after-downsample"
    count: int = 2
    indices: list = None
    spacing: int = 1
    position: str = "input"

    def to_dict(self):
        return {"rule": self.rule, "count": self.count, "indices": self.indices,
                "spacing": self.spacing, "position": self.position}


def _candidates(rule):
    if rule == "after-downsample":
        return DOWNSAMPLE_SITES
    if rule == "bottleneck":
        return BOTTLENECK_SITES
    if rule == "between-blocks":
        return SITES
    raise ConfigError(f"taps.rule must be one of {TAP_RULES}, got {rule!r}")


def resolve_taps(spec, net=None):
    """Resolve a TapSpec into an increasing tuple of tap sites."""
    m = spec.count
    if m < 0:
        raise ConfigError(f"taps.count must be >= 0, got {m}")
    if spec.position not in POSITIONS:
        raise ConfigError(f"taps.position must be one of {POSITIONS}, got {spec.position!r}")
    if spec.spacing not in (1, 2, 3):
        raise ConfigError(f"taps.spacing must be 1, 2 or 3, got {spec.spacing}")

    if spec.rule == "explicit-indices":
        idx = list(spec.indices or [])
        if spec.indices is None or len(idx) != m:
            raise ConfigError(f"taps.indices must list exactly count={m} sites, got {spec.indices}")
        if any(i not in SITES for i in idx):
            raise ConfigError(f"taps.indices must lie in {list(SITES)} (before the head), got {idx}")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"taps.indices must be strictly increasing, got {idx}")
        return tuple(idx)

    cands = _candidates(spec.rule)
    if m == 0:
        return ()
    span = (m - 1) * spec.spacing
    if span + 1 > len(cands):
        raise ConfigError(
            f"taps: rule {spec.rule!r} offers {len(cands)} candidate sites; "
            f"count={m} with spacing={spec.spacing} needs {span + 1}")
    slack = len(cands) - 1 - span
    start = {"input": 0, "central": slack // 2, "output": slack}[spec.position]
    return tuple(cands[start + j * spec.spacing] for j in range(m))


def forward_with_taps(net, taps, x):
    """Forward pass returning (logits, [z^1..z^M]) for resolved tap sites."""
    if x.data.ndim != 4 or x.shape[1] != net.in_channels:
        raise DimensionError(f"input must be [B,{net.in_channels},H,W], got {list(x.shape)}")
    h, w = x.shape[2:]
    if h % 4 or w % 4:
        raise DimensionError(f"input spatial axes must be divisible by 4, got H={h}, W={w}")
    p = net.params
    want = set(taps)
    acts = []

    def keep(site, t):
        if site in want:
            acts.append(t)
        return t

    t = keep(0, ops.relu(ops.conv2d(x, p["enc1.w"], p["enc1.b"])))
    t = keep(1, ops.maxpool2x2(t))
    t = keep(2, ops.relu(ops.conv2d(t, p["enc2.w"], p["enc2.b"])))
    t = keep(3, ops.maxpool2x2(t))
    t = keep(4, ops.relu(ops.conv2d(t, p["bottleneck.w"], p["bottleneck.b"])))
    t = keep(5, ops.relu(ops.conv2d(ops.upsample_nearest2x(t), p["dec1.w"], p["dec1.b"])))
    t = keep(6, ops.relu(ops.conv2d(ops.upsample_nearest2x(t), p["dec2.w"], p["dec2.b"])))
    logits = ops.conv2d(t, p["head.w"], p["head.b"])
    return logits, acts


def forward(net, x):
    return forward_with_taps(net, (), x)[0]


class Adapter:
    """Resolution adapter for one tap: 1x1 conv to K classes, nearest
    upsampling back to input resolution, channel softmax.

    With ``hidden=True`` a 1x1 conv + relu (C_m -> C_m) precedes the class
    projection.
    """

    def __init__(self, index, in_channels, classes, scale, params):
        self.index = index
        self.in_channels = in_channels
        self.classes = classes
        self.scale = scale
        self.params = params

    @property
    def hidden(self):
        return f"adapter{self.index}.hw" in self.params

    def parameters(self):
        return list(self.params.values())

    def __call__(self, z):
        return adapter_forward(self, z)


def adapter_forward(adapter, z):
    if z.data.ndim != 4 or z.shape[1] != adapter.in_channels:
        raise DimensionError(
            f"adapter {adapter.index}: expected {adapter.in_channels} channels on axis 1, got shape {list(z.shape)}")
    p = adapter.params
    pre = f"adapter{adapter.index}"
    t = z
    if adapter.hidden:
        t = ops.relu(ops.conv2d(t, p[f"{pre}.hw"], p[f"{pre}.hb"]))
    t = ops.conv2d(t, p[f"{pre}.w"], p[f"{pre}.b"])
    s = adapter.scale
    while s > 1:
        t = ops.upsample_nearest2x(t)
        s //= 2
    return ops.softmax_channels(t)


def build_adapters(net, taps, seed, hidden=False, dtype=None):
    dtype = dtype or get_dtype()
    rng = RngStream(seed, _ADAPTER_STREAM)
    out = []
    for m, site in enumerate(taps):
        cm = net.site_channels(site)
        pre = f"adapter{m}"
        params = {}
        if hidden:
            params[f"{pre}.hw"] = Tensor(_he(rng, (cm, cm, 1, 1)), requires_grad=True, name=f"{pre}.hw", dtype=dtype)
            params[f"{pre}.hb"] = Tensor(np.zeros(cm), requires_grad=True, name=f"{pre}.hb", dtype=dtype)
        params[f"{pre}.w"] = Tensor(_he(rng, (net.classes, cm, 1, 1)), requires_grad=True, name=f"{pre}.w", dtype=dtype)
        params[f"{pre}.b"] = Tensor(np.zeros(net.classes), requires_grad=True, name=f"{pre}.b", dtype=dtype)
        out.append(Adapter(m, cm, net.classes, net.site_scale(site), params))
    return out


def adapters_state(adapters):
    return {k: v.data for a in adapters for k, v in a.params.items()}


def load_adapters_state(adapters, state):
    for a in adapters:
        for k, t in a.params.items():
            arr = state[k]
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {k}: shape {list(arr.shape)} != {list(t.shape)}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)
            t.grad = None
