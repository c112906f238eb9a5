"""Kernel backend selection.

The recurrent inner loops in :mod:`dtalker.kernels` are compiled with numba
when it is importable.  Set ``DTALKER_NUMBA=0`` to force the pure-numpy
reference path (useful for debugging and for the backend benchmark); any
other value, or an absent variable, enables compilation when possible.
"""

import os


def numba_requested() -> bool:
    return os.environ.get("DTALKER_NUMBA", "1") != "0"


def numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = numba_requested() and numba_available()
