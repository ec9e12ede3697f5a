"""JIT switch for the hot kernels.

Kernels are written once in plain numpy/python loops and compiled with
``numba.njit`` unless ``DHFLEX_DISABLE_JIT=1`` is set (or numba is missing),
in which case the same function objects run as ordinary Python.
"""
import os

_DISABLED = os.environ.get("DHFLEX_DISABLE_JIT", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    _njit = None


def jit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when enabled, identity otherwise."""
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)

    def wrap(f):
        if not HAS_NUMBA:
            return f
        return _njit(**opts)(f)

    if func is not None:
        return wrap(func)
    return wrap


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
