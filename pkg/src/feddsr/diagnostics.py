"""Measured and closed-form quantities of the non-convex convergence bound.

The smoothness/gradient/variance constants of the bound cannot be measured
exactly.  Gradient bounds and variances here are estimates from probe passes
and the smoothness constant is a user input, so every BoundReport is an
estimate.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .objectives import objective
from .tensor import GradientTape, Tensor


# --------------------------------------------------------------------------
# gradients at a shared model
# --------------------------------------------------------------------------

def _flat(grads):
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])


def full_batch_gradient(net, adapters, taps, dataset, weights, ne_channels=None):
    """Gradient of the full local objective over all of ``dataset`` with
    respect to the network parameters, as a float64 vector."""
    x = Tensor(dataset.images, dtype=net.params["enc1.w"].dtype)
    with GradientTape() as tape:
        lb = objective(net, adapters, taps, x, dataset.labels, weights, ne_channels)
    return _flat(tape.backward(lb.tensor, net.parameters()))


@dataclass
class HeterogeneityReport:
    deviations: list  # per vehicle ||g_n - g||^2
    H: float
    grad_norm_sq: float  # ||sum_n w_n g_n||^2


def heterogeneity(gradients, weights):
    """H = sum_n w_n ||g_n - g||^2 with g = sum_n w_n g_n.

    ``gradients`` are per-vehicle vectors; ``weights`` sum to one.  The
    reduction runs in list order.
    """
    g = np.zeros_like(np.asarray(gradients[0], dtype=np.float64))
    for w, gn in zip(weights, gradients):
        g += w * np.asarray(gn, dtype=np.float64)
    devs = [float(np.sum((np.asarray(gn, dtype=np.float64) - g) ** 2)) for gn in gradients]
    H = float(sum(w * d for w, d in zip(weights, devs)))
    return HeterogeneityReport(devs, H, float(np.dot(g, g)))


def measure_heterogeneity(net, adapters, taps, datasets, weights, loss_weights, ne_channels=None):
    grads = [full_batch_gradient(net, adapters, taps, d, loss_weights, ne_channels) for d in datasets]
    return heterogeneity(grads, weights)


# --------------------------------------------------------------------------
# composite gradient / variance constants
# --------------------------------------------------------------------------

@dataclass
class ProbeStats:
    """Per-vehicle bounds for each loss component: G (max minibatch gradient
    norm) and sigma^2 (mean squared deviation from the full-batch gradient)."""
    g_ce: float
    g_mi: list
    g_ne: list
    s_ce: float
    s_mi: list
    s_ne: list


def _component_grads(tape, lb, params):
    out = [_flat(tape.backward(lb.parts["ce"], params))]
    out += [_flat(tape.backward(t, params)) for t in lb.parts["mi"]]
    out += [_flat(tape.backward(t, params)) for t in lb.parts["ne"]]
    return out


def probe_constants(net, adapters, taps, dataset, batch_size, weights, ne_channels=None):
    """One ordered pass over ``dataset`` in minibatches, measuring each
    component's gradient norm and its deviation from the full-batch value."""
    params = net.parameters()
    dtype = params[0].dtype
    x = Tensor(dataset.images, dtype=dtype)
    with GradientTape() as tape:
        lb = objective(net, adapters, taps, x, dataset.labels, weights, ne_channels)
    full = _component_grads(tape, lb, params)
    gmax = np.zeros(len(full))
    var = np.zeros(len(full))
    nb = 0
    for lo in range(0, len(dataset), batch_size):
        xb = Tensor(dataset.images[lo : lo + batch_size], dtype=dtype)
        with GradientTape() as tape:
            lb = objective(net, adapters, taps, xb, dataset.labels[lo : lo + batch_size], weights, ne_channels)
        for i, (gb, gf) in enumerate(zip(_component_grads(tape, lb, params), full)):
            gmax[i] = max(gmax[i], float(np.linalg.norm(gb)))
            var[i] += float(np.sum((gb - gf) ** 2))
        nb += 1
    var /= nb
    m = len(taps)
    return ProbeStats(float(gmax[0]), gmax[1 : 1 + m].tolist(), gmax[1 + m :].tolist(),
                      float(var[0]), var[1 : 1 + m].tolist(), var[1 + m :].tolist())


def composite(ce, mi, ne, weights, alpha, lam):
    """sum_n w_n (ce_n^2 + sum_m (alpha_m^2 mi_nm^2 + lambda_m^2 ne_nm^2)).

    ``ce`` is per vehicle; ``mi`` and ``ne`` are per vehicle lists over taps.
    """
    total = 0.0
    for w, c, mis, nes in zip(weights, ce, mi, ne):
        inner = c * c
        for a, l, gm, gn in zip(alpha, lam, mis, nes):
            inner += a * a * gm * gm + l * l * gn * gn
        total += w * inner
    return total


def composite_constants(stats, weights, alpha, lam):
    """(G_T^2, sigma_T^2) from per-vehicle ProbeStats.

    The variance fields already hold squared quantities, so they enter
    through their square roots.
    """
    if any(v < 0 for s in stats for v in [s.g_ce, s.s_ce, *s.g_mi, *s.g_ne, *s.s_mi, *s.s_ne]):
        raise ContractError("probe constants must be nonnegative")
    g2 = composite([s.g_ce for s in stats], [s.g_mi for s in stats], [s.g_ne for s in stats],
                   weights, alpha, lam)
    s2 = composite([math.sqrt(s.s_ce) for s in stats], [[math.sqrt(v) for v in s.s_mi] for s in stats],
                   [[math.sqrt(v) for v in s.s_ne] for s in stats], weights, alpha, lam)
    return g2, s2


# --------------------------------------------------------------------------
# the bound
# --------------------------------------------------------------------------

@dataclass
class BoundInputs:
    delta: float  # L(theta_0) - L*
    eta: float
    T: int
    E: int
    L_max: float
    G_T2: float = 0.0
    sigma_T2: float = 0.0
    H: float = 0.0
    grad_norm_sq: float = 0.0
    c: float = 1.0


@dataclass
class BoundReport:
    initial_gap: float
    drift: float  # c E^2 (||grad||^2 + H)
    variance_term: float  # L_max eta / sqrt(T) * (G_T^2 + sigma_T^2)
    drift_term: float  # L_max eta / sqrt(T) * drift
    total: float
    estimate: bool = field(default=True)

    def as_dict(self):
        return {"initial_gap": self.initial_gap, "drift": self.drift, "variance_term": self.variance_term,
                "drift_term": self.drift_term, "total": self.total, "estimate": self.estimate}


def theorem1_bound(inp):
    """Right-hand side of the averaged squared-gradient bound under the
    eta/sqrt(T) step size."""
    if not inp.eta > 0:
        raise ContractError(f"eta must be > 0, got {inp.eta}")
    if not inp.T > 0:
        raise ContractError(f"T must be > 0, got {inp.T}")
    root_t = math.sqrt(inp.T)
    gap = 2.0 * inp.delta / (inp.eta * root_t)
    drift = inp.c * inp.E ** 2 * (inp.grad_norm_sq + inp.H)
    scale = inp.L_max * inp.eta / root_t
    var_term = scale * (inp.G_T2 + inp.sigma_T2)
    drift_term = scale * drift
    return BoundReport(gap, drift, var_term, drift_term, gap + var_term + drift_term)


# --------------------------------------------------------------------------
# empirical rate
# --------------------------------------------------------------------------

@dataclass
class Trend:
    slope: float
    intercept: float
    residual: float  # RMS residual of the log-log fit


def running_average(values):
    v = np.asarray(values, dtype=np.float64)
    return np.cumsum(v) / np.arange(1, len(v) + 1)


def convergence_trend(averaged, window=None):
    """Least-squares slope of log(averaged[T-1]) against log T.

    ``averaged`` holds the running mean of squared gradient norms up to
    each T = 1..len.  ``window`` keeps only the last ``window`` points.
    """
    y = np.asarray(averaged, dtype=np.float64)
    if len(y) < 10:
        raise ContractError(f"convergence_trend needs >= 10 rounds, got {len(y)}")
    t = np.arange(1, len(y) + 1, dtype=np.float64)
    if window is not None:
        if window < 2:
            raise ContractError(f"window must be >= 2, got {window}")
        t, y = t[-window:], y[-window:]
    if np.any(y <= 0):
        raise ContractError("convergence_trend needs positive values")
    lx, ly = np.log(t), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    return Trend(float(slope), float(intercept), float(np.sqrt(np.mean(resid ** 2))))
