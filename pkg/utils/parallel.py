"""
Ordered worker-pool map behind the --jobs flag.
"""
import logging
from concurrent.futures import ThreadPoolExecutor

logger = logging.getLogger(__name__)


def parallel_map(fn, items, jobs=1):
    """
    Apply fn to every item, optionally on a thread pool.

    Results come back in input order, so reductions over them are the same
    whatever the worker count.
    """
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(int(jobs), len(items))
    logger.debug("mapping %d items over %d workers", len(items), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
