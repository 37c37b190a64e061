"""Counter-based random streams.

Every Monte Carlo task draws from a Philox generator keyed by the master seed
and a task counter, so results do not depend on how tasks are scheduled.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_SEED = 20240917
CHUNK = 4096


def stream(seed: int, *counter: int) -> np.random.Generator:
    """Independent generator for task ``counter`` under ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, counter)])))


def chunk_sizes(n: int, chunk: int = CHUNK) -> list[int]:
    full, rest = divmod(int(n), chunk)
    return [chunk] * full + ([rest] if rest else [])


def map_chunks(fn, n: int, workers: int = 1, chunk: int = CHUNK) -> list:
    """Apply ``fn(index, size)`` to every chunk; results come back in chunk order."""
    sizes = chunk_sizes(n, chunk)
    if workers <= 1 or len(sizes) <= 1:
        return [fn(i, s) for i, s in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(sizes)), sizes))
