"""Backend selection for the hot kernels.

Set ``ATTNFLOW_DISABLE_NUMBA=1`` to force the pure-numpy code path (useful for
debugging, for platforms without numba, or for the benchmark comparison).
"""
import os

_FLAG = os.environ.get("ATTNFLOW_DISABLE_NUMBA", "").strip().lower()

try:
    import numba  # noqa: F401
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise.

    Kernels are always compiled if numba exists, so both backends can be
    benchmarked side by side in one process; ``USE_NUMBA`` only decides which
    one the public dispatchers call.
    """
    if HAVE_NUMBA:
        import numba
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
