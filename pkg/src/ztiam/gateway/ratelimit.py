from __future__ import annotations

import threading
import time
from typing import Callable


class TokenBucketLimiter:
    """Per-key token buckets: ``rate`` tokens per second, capacity ``burst``."""

    def __init__(self, rate: float, burst: int, clock: Callable[[], float] = time.monotonic, max_keys: int = 100_000):
        self.rate = rate
        self.burst = burst
        self.clock = clock
        self.max_keys = max_keys
        self._buckets: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def allow(self, key: str) -> bool:
        now = self.clock()
        with self._lock:
            tokens, last = self._buckets.get(key, (float(self.burst), now))
            tokens = min(float(self.burst), tokens + (now - last) * self.rate)
            ok = tokens >= 1.0
            if ok:
                tokens -= 1.0
            if len(self._buckets) >= self.max_keys and key not in self._buckets:
                # drop full buckets; they carry no state worth keeping
                self._buckets = {
                    k: v for k, v in self._buckets.items() if v[0] + (now - v[1]) * self.rate < self.burst
                }
            self._buckets[key] = (tokens, now)
            return ok
