"""Numba switch.

Kernels in :mod:`dvf.kernels` are compiled with ``numba.njit`` unless the
environment variable ``DVF_NUMBA`` is set to ``0`` (or numba is missing), in
which case the pure-numpy implementations are used instead.
"""
import os

ENABLE_NUMBA = os.environ.get("DVF_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None
    ENABLE_NUMBA = False


def backend():
    return "numba" if ENABLE_NUMBA else "numpy"


def jit(func):
    """Compile ``func`` with numba in nopython mode, or return it unchanged."""
    if ENABLE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
