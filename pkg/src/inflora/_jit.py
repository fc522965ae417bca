"""Numba switch.

Set ``INFLORA_DISABLE_JIT=1`` to run the pure-numpy kernels instead of the
compiled ones. The choice is read once at import time.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

DISABLED = os.environ.get("INFLORA_DISABLE_JIT", "").strip().lower() not in _FALSY

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)
