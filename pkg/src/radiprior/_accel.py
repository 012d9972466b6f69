"""Numba switch.

Hot kernels are written twice: a numba ``@njit`` version and a pure numpy
version.  ``RADIPRIOR_NUMBA=0`` forces the numpy path (also used when numba is
not importable).  The flag is read once at import time.
"""
import os

_flag = os.environ.get("RADIPRIOR_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "no", "off")

try:
    import numba
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

USE_NUMBA = USE_NUMBA and HAS_NUMBA


def set_threads(n):
    if HAS_NUMBA and n is not None and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
