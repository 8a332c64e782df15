"""Numba toggle.

Set ``LAEIDS_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable. The flag is read once at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

DISABLED = os.environ.get("LAEIDS_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
NUMBA_AVAILABLE = numba is not None
NUMBA_ENABLED = NUMBA_AVAILABLE and not DISABLED


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it unchanged."""
    if not NUMBA_AVAILABLE:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
