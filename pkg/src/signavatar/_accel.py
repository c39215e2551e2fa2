"""Numba switch.

Set ``SIGNAVATAR_NO_NUMBA=1`` to force the pure-numpy kernels, e.g. for
debugging or on platforms without a working llvmlite.
"""

from __future__ import annotations

import os

_FLAG = "SIGNAVATAR_NO_NUMBA"


def numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


try:  # pragma: no cover - depends on environment
    if not numba_requested():
        raise ImportError("disabled by " + _FLAG)
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


__all__ = ["HAVE_NUMBA", "njit", "numba_requested"]
