"""Backend selection for the loop-heavy kernels.

Numba is used when it imports cleanly and ``JOMOLD_DISABLE_NUMBA`` is not set
to a truthy value.  The flag is read once, at import time.
"""

import os

_FLAG = os.environ.get("JOMOLD_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by JOMOLD_DISABLE_NUMBA")
    import numba as _numba
except ImportError:
    _numba = None

HAVE_NUMBA = _numba is not None
BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit(fn):
    """Compile ``fn`` with numba if available, otherwise return it as is."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)
