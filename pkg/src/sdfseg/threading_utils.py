"""Worker-thread control: --threads 1 is the bit-deterministic path."""

from __future__ import annotations


def set_threads(n: int | None):
    """Cap numba and BLAS worker threads (None / 0 leaves defaults)."""
    if not n or n < 1:
        return
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass
