"""Seeding, parallel map and call counting shared by the compute modules."""

import os
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed, *stream):
    """Philox generator keyed by ``seed`` and an optional stream path.

    Philox is counter based, so a given (seed, stream) draws the same
    numbers on every platform numpy supports.
    """
    words = [int(seed) & SEED_MASK]
    for part in stream:
        if isinstance(part, str):
            part = int.from_bytes(part.encode(), "little") & SEED_MASK
        words.append(int(part) & SEED_MASK)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def thread_count():
    raw = os.environ.get("ABCKIT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Map ``fn`` over ``items``, results in input order.

    The worker count never changes results: every task is independent and
    reduction happens in the caller, indexed by position.
    """
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


class CallCounter:
    """Thread-safe tally of single-image denoiser evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.tangent_calls = 0
        self.matvecs = 0

    def add(self, calls=0, tangent_calls=0, matvecs=0):
        with self._lock:
            self.calls += calls
            self.tangent_calls += tangent_calls
            self.matvecs += matvecs

    @property
    def denoiser_calls(self):
        return self.calls + self.tangent_calls


_active = []
_active_lock = threading.Lock()


class counting:
    """Context manager that records denoiser work done inside it.

    >>> with counting() as c:
    ...     pass
    >>> c.denoiser_calls
    0
    """

    def __enter__(self):
        self.counter = CallCounter()
        with _active_lock:
            _active.append(self.counter)
        return self.counter

    def __exit__(self, *exc):
        with _active_lock:
            _active.remove(self.counter)
        return False


def record(calls=0, tangent_calls=0, matvecs=0):
    if not _active:
        return
    with _active_lock:
        counters = list(_active)
    for c in counters:
        c.add(calls, tangent_calls, matvecs)
