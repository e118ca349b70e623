"""Worker capping for the numerical hot loops.

On small machines the BLAS pool's spin-waiting workers starve the
single-threaded elementwise work that alternates with the matrix products,
so compute-heavy loops default to one worker. The DUALSCORE_THREADS
environment variable overrides the cap.
"""

import os
from contextlib import contextmanager

from threadpoolctl import threadpool_limits


def worker_cap(default=1) -> int:
    value = os.environ.get("DUALSCORE_THREADS", "")
    if value.strip():
        return max(1, int(value))
    return default


@contextmanager
def limited_workers(default=1):
    with threadpool_limits(limits=worker_cap(default)):
        yield
