"""Backend selection for the hot kernels.

Kernels are written twice: a numba ``@njit`` version and a pure-numpy
version. Set ``VIBGUARD_BACKEND=numpy`` to force the numpy path (useful when
numba is unavailable or when comparing the two in ``benchmarks/``).
"""
import logging
import os

log = logging.getLogger(__name__)

_requested = os.environ.get("VIBGUARD_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"VIBGUARD_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    import numba

    logging.getLogger("numba").setLevel(logging.WARNING)
    # skip the TBB probe; it warns on older TBB builds
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _requested == "numba"
if _requested == "numba" and not HAVE_NUMBA:  # pragma: no cover
    log.warning("numba not installed; falling back to numpy kernels")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator.

    The decorated function is always returned (compiled or not) so both
    backends can be called directly in tests.
    """
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n):
    """Cap worker threads for parallel kernels. ``n=1`` gives bit-reproducible runs."""
    if n is None:
        env = os.environ.get("VIBGUARD_THREADS")
        if not env:
            return
        n = int(env)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if HAVE_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
