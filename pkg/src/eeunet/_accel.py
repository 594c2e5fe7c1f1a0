"""Optional numba acceleration.

Set ``EEUNET_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""
import os

_disabled = os.environ.get("EEUNET_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("numba disabled by EEUNET_DISABLE_NUMBA")
    import numba

    NUMBA_AVAILABLE = True

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def set_threads(n):
    """Cap numba's worker pool; a no-op on the numpy path."""
    if NUMBA_AVAILABLE and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
