"""Optional numba acceleration.

Set ``FEDDSR_NO_NUMBA=1`` to force the pure-numpy kernels (also used
automatically when numba is not importable).
"""
import os

_disabled = os.environ.get("FEDDSR_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("numba disabled by FEDDSR_NO_NUMBA")
    from numba import njit as _njit

    USING_NUMBA = True

    def jit(fn):
        return _njit(cache=True, nogil=True)(fn)

except ImportError:
    USING_NUMBA = False

    def jit(fn):
        return fn
