"""Numba switch.

Hot kernels in :mod:`mapstop.kernels` come in two flavours: a numba
``@njit`` loop and a pure numpy/python fallback.  The numba path is used when
numba imports and ``MAPSTOP_DISABLE_NUMBA`` is unset (or ``0``).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("MAPSTOP_DISABLE_NUMBA", "0") in ("", "0")


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or a no-op when numba is missing."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
