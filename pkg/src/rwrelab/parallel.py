"""Order-preserving task map over a process pool."""
from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor


def pmap(fn, tasks, workers: int = 1) -> list:
    """``[fn(t) for t in tasks]``, optionally spread over ``workers`` processes.

    Results come back in task order, so any reduction done by the caller is
    independent of the worker count.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as ex:
        return list(ex.map(fn, tasks, chunksize=1))
