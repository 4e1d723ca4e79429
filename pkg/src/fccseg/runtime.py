"""Thread-count and determinism control for the numeric kernels.

All heavy contractions go through BLAS, whose float64 results can change
bitwise with the number of BLAS threads. Deterministic mode therefore pins
BLAS to a single thread for the duration of a computation, which makes
every output byte-identical regardless of the requested thread count.
Non-deterministic mode uses the configured (or default) BLAS parallelism.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Iterator

from threadpoolctl import threadpool_limits

THREADS_ENV_VAR = "FCC_THREADS"

_threads: int | None = None
_deterministic: bool = False


def configure(threads: int | None = None, deterministic: bool = False) -> None:
    """Set the process-wide thread count and determinism flag."""
    global _threads, _deterministic
    if threads is not None and threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    _threads = threads
    _deterministic = deterministic


def threads_from_env(default: int | None = None) -> int | None:
    """Resolve a thread count from the FCC_THREADS fallback variable."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {value}")
    return value


def is_deterministic() -> bool:
    return _deterministic


@contextmanager
def compute_limits() -> Iterator[None]:
    """Limit BLAS parallelism for a compute section.

    Deterministic mode forces a single BLAS thread so accumulation order is
    fixed; otherwise the configured thread count (or the library default)
    applies.
    """
    limit = 1 if _deterministic else _threads
    if limit is None:
        yield
    else:
        with threadpool_limits(limits=limit):
            yield


@contextmanager
def deterministic_mode() -> Iterator[None]:
    """Temporarily switch the process into deterministic single-thread mode."""
    global _deterministic
    previous = _deterministic
    _deterministic = True
    try:
        yield
    finally:
        _deterministic = previous
