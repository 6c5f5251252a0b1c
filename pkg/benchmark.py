"""Wall-clock and memory cost of the in-repo SVD paths.

Timings use time.perf_counter around each call; memory is the peak of
tracemalloc's allocation counter during a separate, untimed call (numpy
reports its buffers to tracemalloc).
"""

import logging
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from errors import PreconditionError
from linalg import randomized_svd, svd_thin

logger = logging.getLogger(__name__)

SIZE_CAP = 4096


@dataclass(frozen=True)
class BenchRow:
    HEADER = ("size", "t_median_ms", "t_p90_ms", "mem_bytes", "method", "repeats")

    size: int
    t_median_ms: float
    t_p90_ms: float
    mem_bytes: int
    method: str
    repeats: int

    def cells(self):
        return [self.size, repr(self.t_median_ms), repr(self.t_p90_ms), self.mem_bytes, self.method,
                self.repeats]


def _peak_bytes(fn, arg):
    tracemalloc.start()
    try:
        fn(arg)
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _time(fn, arg, repeats):
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(arg)
        samples.append((time.perf_counter() - start) * 1e3)
    return float(np.median(samples)), float(np.percentile(samples, 90))


def bench_svd(sizes, repeats=5, seed=0, randomized_rank=None, cap=SIZE_CAP):
    """Time thin SVD (and optionally a rank-`randomized_rank` sketch) on random square matrices."""

    sizes = list(sizes)
    if repeats < 1:
        raise PreconditionError(f"repeats must be positive, got {repeats}")
    too_big = [n for n in sizes if not 1 <= n <= cap]
    if too_big:
        raise PreconditionError(f"sizes {too_big} are outside [1, {cap}]")

    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        w = rng.standard_normal((n, n))
        methods = [("jacobi", svd_thin)]
        if randomized_rank is not None:
            rank = min(randomized_rank, n)
            methods.append(("randomized", lambda a, rank=rank: randomized_svd(a, rank, seed=seed)))
        for method, fn in methods:
            median, p90 = _time(fn, w, repeats)
            row = BenchRow(method=method, size=n, repeats=repeats, t_median_ms=median, t_p90_ms=p90,
                           mem_bytes=_peak_bytes(fn, w))
            logger.info("%s SVD %dx%d: median %.2f ms, p90 %.2f ms, peak %d bytes",
                        method, n, n, median, p90, row.mem_bytes)
            rows.append(row)
    return rows
