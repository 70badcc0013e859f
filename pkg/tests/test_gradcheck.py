import numpy as np
import pytest

from feddsr import ops
from feddsr.cli import gradcheck_setup
from feddsr.gradcheck import finite_diff_check, gradient_check
from feddsr.tensor import Tensor, precision


def test_quadratic_double_precision(rng):
    with precision("double"):
        w = Tensor(rng.normal(size=6), requires_grad=True)
        a = Tensor(rng.normal(size=6))
        err = finite_diff_check(lambda: ops.tsum(ops.mul(ops.mul(w, w), a)), [w])
    assert err < 1e-6


def test_parameters_restored_after_check(rng):
    with precision("double"):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        before = w.data.copy()
        finite_diff_check(lambda: ops.tsum(ops.mul(w, w)), [w])
    np.testing.assert_array_equal(w.data, before)


def test_detects_a_wrong_gradient(rng):
    # a deliberately wrong backward must be caught
    from feddsr.ops import _out

    def bad_square(x):
        return _out("bad", x.data * x.data, (x,), lambda g: (g * x.data,), x.dtype)

    with precision("double"):
        w = Tensor(rng.normal(size=3) + 2.0, requires_grad=True)
        assert finite_diff_check(lambda: ops.tsum(bad_square(w)), [w]) > 0.1


def test_subsampled_coordinates(rng):
    with precision("double"):
        w = Tensor(rng.normal(size=50), requires_grad=True)
        res = gradient_check(lambda: ops.tsum(ops.mul(w, w)), [w], max_coords=7, rng=rng)
    assert res.checked == 7


@pytest.mark.parametrize("prec,limit", [("single", 1e-3), ("double", 1e-5)])
def test_full_objective_tiny_config(prec, limit):
    with precision(prec):
        f, params = gradcheck_setup()
        res = gradient_check(f, params)
    assert res.checked > 0.9 * sum(p.data.size for p in params)
    assert res.max_rel_error < limit
