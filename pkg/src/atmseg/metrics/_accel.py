"""Backend selection for the distance kernels.

``ATMSEG_NUMPY_ONLY=1`` forces the pure-numpy path; otherwise numba is used
when it imports.
"""

from __future__ import annotations

import os

NUMPY_ONLY = os.environ.get("ATMSEG_NUMPY_ONLY", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not NUMPY_ONLY


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
