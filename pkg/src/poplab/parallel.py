"""Worker-count policy and an order-preserving thread map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

from .errors import ConfigError

ENV_VAR = "POP_THREADS"


def worker_count(default: int = 1) -> int:
    """Workers from ``POP_THREADS`` (default 1)."""
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_VAR} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{ENV_VAR} must be >= 1")
    return n


def ordered_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> list:
    """``[fn(x) for x in items]``, possibly concurrent; results keep input order."""
    n = workers or worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))
