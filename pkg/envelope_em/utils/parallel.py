"""
Replicate parallelism
"""
import logging
from typing import Callable, Iterable, List, TypeVar

from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(func: Callable[[T], R], items: Iterable[T], n_jobs: int = 1) -> List[R]:
    """
    Apply func to every item, results in input order

    n_jobs=1 runs in-process without joblib; otherwise threads are used since
    the heavy lifting is LAPACK, which releases the GIL.
    """
    items = list(items)
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug(f"Dispatching {len(items)} tasks with n_jobs={n_jobs}")
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(func)(item) for item in items)
