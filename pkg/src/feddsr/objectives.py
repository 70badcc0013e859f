"""Local training objective: output cross-entropy, per-tap supervision
through the adapters, per-tap negative entropy, and their weighted sum.

All three families average over samples and (labelled) pixels, so the
tap weights do not depend on image resolution.
"""
from dataclasses import dataclass, field

from . import ops
from .errors import ContractError
from .model import forward_with_taps
from .tensor import Tensor


@dataclass
class LossWeights:
    alpha: list
    lam: list

    def __post_init__(self):
        self.alpha = [float(a) for a in self.alpha]
        self.lam = [float(v) for v in self.lam]
        if len(self.alpha) != len(self.lam):
            raise ContractError(f"alpha has {len(self.alpha)} entries but lambda has {len(self.lam)}")
        if any(a < 0 for a in self.alpha) or any(v < 0 for v in self.lam):
            raise ContractError("loss weights must be nonnegative")

    @classmethod
    def uniform(cls, m, alpha=0.4, lam=0.1):
        return cls([alpha] * m, [lam] * m)

    @property
    def m(self):
        return len(self.alpha)


@dataclass
class LossBreakdown:
    ce: float
    mi: list
    ne: list
    total: float
    tensor: Tensor = field(default=None, repr=False, compare=False)
    parts: dict = field(default=None, repr=False, compare=False)

    def summary(self):
        return {"ce": self.ce, "mi": list(self.mi), "ne": list(self.ne), "total": self.total}


def ce_loss(logits, labels):
    """Mean per-pixel -log p(true class) of the output softmax."""
    return ops.nll_probs(ops.softmax_channels(logits), labels)


def mi_loss(adapter_probs, labels):
    """Label cross-entropy through an adapter's per-pixel class distribution."""
    return ops.nll_probs(adapter_probs, labels)


def ne_reg(z, channels=None):
    """Mean per-pixel sum_c p_c log p_c of the channel softmax of ``z``.

    ``channels`` restricts the softmax to a prefix of the channel axis.
    """
    if channels is not None:
        z = ops.channel_prefix(z, channels)
    return ops.neg_entropy(ops.softmax_channels(z))


def _as_tensor(v):
    return v if isinstance(v, Tensor) else Tensor(float(v))


def total_loss(ce, mi, ne, weights):
    """ce + sum_m (alpha_m mi_m + lambda_m ne_m).

    Terms with a zero weight are left out of the graph entirely, so a
    zero-weighted tap leaves every gradient bit-identical to an untapped run.
    """
    if not (len(mi) == len(ne) == weights.m):
        raise ContractError(f"expected {weights.m} tap terms, got mi={len(mi)}, ne={len(ne)}")
    ce_t = _as_tensor(ce)
    mi_t = [_as_tensor(v) for v in mi]
    ne_t = [_as_tensor(v) for v in ne]
    total = ce_t
    for a, lam, m_t, n_t in zip(weights.alpha, weights.lam, mi_t, ne_t):
        if a != 0.0:
            total = ops.add(total, ops.scale(m_t, a))
        if lam != 0.0:
            total = ops.add(total, ops.scale(n_t, lam))
    return LossBreakdown(
        ce=float(ce_t.data),
        mi=[float(v.data) for v in mi_t],
        ne=[float(v.data) for v in ne_t],
        total=float(total.data),
        tensor=total,
        parts={"ce": ce_t, "mi": mi_t, "ne": ne_t},
    )


def objective(net, adapters, taps, x, labels, weights, ne_channels=None):
    """Forward the network with taps and build the full local objective."""
    logits, acts = forward_with_taps(net, taps, x)
    ce = ce_loss(logits, labels)
    mi = [mi_loss(ad(z), labels) for ad, z in zip(adapters, acts)]
    ne = [ne_reg(z, None if ne_channels is None else min(ne_channels, z.shape[1])) for z in acts]
    return total_loss(ce, mi, ne, weights)
