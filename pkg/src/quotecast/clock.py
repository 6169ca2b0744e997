"""Clocks for the polling loops.

Loops never call ``time`` directly; they take a clock with ``now()`` and
``sleep(seconds)`` so tests can run on virtual time.
"""

from __future__ import annotations

import threading
import time
from datetime import datetime, timezone
from typing import Optional


class SystemClock:
    """Wall-clock time. ``sleep`` returns early once ``stop`` is set."""

    def __init__(self, stop: Optional[threading.Event] = None):
        self.stop = stop

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if self.stop is not None:
            self.stop.wait(seconds)
        else:
            time.sleep(seconds)


class VirtualClock:
    """Deterministic clock whose ``sleep`` advances time instantly.

    Every sleep is recorded in :attr:`sleeps` for accounting in tests.
    """

    def __init__(self, start: float = 1_647_381_600.0):
        self.start = start
        self._now = start
        self.sleeps: list[float] = []

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        self.sleeps.append(seconds)
        self._now += seconds

    def advance(self, seconds: float) -> None:
        self._now += seconds

    @property
    def elapsed(self) -> float:
        return self._now - self.start


def iso_utc(epoch: float) -> str:
    """ISO-8601 UTC timestamp with second resolution."""
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
