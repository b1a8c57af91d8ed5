"""Numba switch for the hot kernels.

Set ``SSGRASP_NO_NUMBA=1`` to force the pure-numpy code paths (also used
automatically when numba cannot be imported).
"""
import os

_DISABLED = os.environ.get("SSGRASP_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        # bare @njit or @njit(cache=True, ...)
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


def use_numba():
    """True when the jitted kernels are active."""
    return HAVE_NUMBA
