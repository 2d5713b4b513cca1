"""Backend selection for the hot kernels.

Set ``EMOCAPS_DISABLE_NUMBA=1`` to force the pure-numpy path.
"""
import os

_DISABLED = os.environ.get("EMOCAPS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by EMOCAPS_DISABLE_NUMBA")
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def backend():
    return "numba" if HAS_NUMBA else "numpy"
