"""Deterministic worker-pool map.

Tasks carry their own counter-derived seeds, so results depend only on the
task index; the reduction below collects them in index order, which makes
reports identical at any --jobs value.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("ERGWALK_DEFAULT_JOBS", "1")))
    except ValueError:
        return 1


def pmap(fn, tasks, jobs: int = 1):
    """Map ``fn`` over ``tasks`` preserving order; processes when jobs > 1."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        chunk = max(1, len(tasks) // (4 * jobs))
        return list(pool.map(fn, tasks, chunksize=chunk))
