"""Optional numba acceleration.

Kernels in :mod:`memrobust.kernels` come in two flavours: a numba ``@njit``
version and a vectorised numpy version.  The numba path is used when numba
imports cleanly and ``MEMROBUST_DISABLE_NUMBA`` is unset (or ``0``).  Set the
variable to ``1`` to force the pure-numpy path, e.g. for debugging or on
platforms without an LLVM toolchain.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled():
    return os.environ.get("MEMROBUST_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is optional
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, otherwise an identity decorator.

    The decorated function is always compiled if numba exists so that the
    benchmark can compare both paths in one process; dispatch between the two
    is decided per kernel through :data:`USE_NUMBA`.
    """
    if _numba is None:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return _numba.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
