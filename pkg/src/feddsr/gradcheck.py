"""Central finite-difference gradient oracle."""
from dataclasses import dataclass

import numpy as np

from .tensor import GradientTape


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple = None  # (param index, flat coordinate)


def _evaluate(f):
    with GradientTape() as tape:
        loss = f()
    return float(loss.data), tape


def gradient_check(f, params, epsilon=None, max_coords=None, rng=None):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and rebuilds the scalar loss from the current
    contents of ``params`` (which are perturbed in place and restored).
    Coordinates whose +-epsilon perturbation flips any piecewise branch
    (relu sign, pool argmax, log clamp) are skipped: the function is not
    differentiable across them.  ``max_coords`` subsamples coordinates per
    parameter using ``rng`` (a fixed-seed generator when omitted).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if epsilon is None:
        epsilon = 1e-5 if params[0].dtype == np.float64 else 1e-3
    with GradientTape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    base_sig = tape.kink_signature()

    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for pi, (p, grad) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            up, t_up = _evaluate(f)
            flat[i] = orig - epsilon
            down, t_down = _evaluate(f)
            flat[i] = orig
            if t_up.kink_signature() != base_sig or t_down.kink_signature() != base_sig:
                skipped += 1
                continue
            # the perturbation actually applied, after rounding to the storage dtype
            h = (float(orig + p.dtype.type(epsilon)) - float(orig - p.dtype.type(epsilon))) / 2.0
            numeric = (up - down) / (2.0 * h)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, int(i))
    return GradCheckResult(worst, checked, skipped, worst_at)


def finite_diff_check(f, params, epsilon=None):
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    return gradient_check(f, params, epsilon).max_rel_error
