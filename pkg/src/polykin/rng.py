"""Counter-based random streams keyed by (seed, stream ids)."""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def stream(seed, *keys):
    """Independent Philox generator for the given seed and integer stream key."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def thread_count(threads=None):
    if threads is None:
        threads = int(os.environ.get("POLYKIN_THREADS", "1") or 1)
    return max(1, int(threads))


def shard_sizes(total, shards):
    """Split total into a fixed number of near-equal nonempty parts."""
    shards = max(1, min(int(shards), int(total)))
    base, extra = divmod(int(total), shards)
    return [base + (i < extra) for i in range(shards)]


def map_shards(fn, sizes, seed, key=0, threads=None):
    """Run fn(rng, size) for each shard and return results in shard order.

    The shard layout depends only on sizes, never on the thread count, so
    results are identical for any number of threads.
    """
    jobs = [(stream(seed, key, i), n) for i, n in enumerate(sizes)]
    workers = thread_count(threads)
    if workers == 1:
        return [fn(r, n) for r, n in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))
