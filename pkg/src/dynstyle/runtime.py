"""Process-wide thread setup. Call :func:`configure_threads` before anything imports numba or numpy.

``threads`` controls the numba tile pool only. BLAS is pinned to one thread:
multi-threaded BLAS reductions are not bitwise reproducible across thread
counts, and the matrices here are far too small to benefit.
"""
from __future__ import annotations

import os

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS",
              "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def configure_threads(threads: int) -> int:
    """Returns the numba thread count actually in effect."""
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    for var in _BLAS_VARS:
        os.environ[var] = "1"
    # the pool size is fixed at numba import; make it large enough for the request
    pool = max(threads, os.cpu_count() or 1)
    os.environ.setdefault("NUMBA_NUM_THREADS", str(pool))
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")   # always available; no TBB version probing
    import numba
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)
    n = min(threads, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
