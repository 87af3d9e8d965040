"""Numba switch.

Set ``DEPSCREEN_NUMBA=0`` before import to run every kernel on the pure
numpy path. When numba is missing the numpy path is used regardless.
"""

import os

_FLAG = os.environ.get("DEPSCREEN_NUMBA", "1").strip().lower()

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator.

    Kernels decorated here are only *called* when ``USE_NUMBA`` is set,
    but they are always defined so the benchmark can time both paths.
    """
    kwargs.setdefault("cache", True)
    if _njit is None:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return _njit(*args, **kwargs)
