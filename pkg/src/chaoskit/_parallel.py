import os
from concurrent.futures import ThreadPoolExecutor

from .errors import InvalidInputError

THREADS_ENV = "CHAOSKIT_THREADS"


def worker_count():
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise InvalidInputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def ordered_map(fn, items):
    """Map ``fn`` over ``items`` and return results in input order.

    Work is spread over ``CHAOSKIT_THREADS`` threads. Every item is computed
    independently, so the thread count never changes the results.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
