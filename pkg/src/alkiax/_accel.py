"""Optional numba acceleration.

Hot loops are written once in a numba-compatible subset of Python and
compiled with :func:`jit`.  Setting ``ALKIAX_DISABLE_NUMBA=1`` in the
environment turns compilation off: batch evaluation then dispatches to a
vectorized numpy twin, and the MPC rollout (sequential in time, nothing
to vectorize) runs as interpreted Python.  ``benchmarks/bench_accel.py``
times both paths.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("ALKIAX_DISABLE_NUMBA", "0").lower() not in ("1", "true", "yes")


def jit(func):
    """Compile ``func`` with numba (nopython, nogil, cached).

    Returns the function unchanged when numba is missing or disabled.
    """
    if not USE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
