"""Injectable time sources.

Every component takes its timestamps from a clock object so that tests and
the cluster simulator run on fully deterministic, simulated time.
"""

from __future__ import annotations

import time


class Clock:
    """Interface: a monotonically non-decreasing source of seconds."""

    def now(self) -> float:
        raise NotImplementedError


class SystemClock(Clock):
    """Wall-clock seconds (monotonic, so successive reads never decrease)."""

    def __init__(self) -> None:
        self._origin = time.time() - time.monotonic()

    def now(self) -> float:
        return self._origin + time.monotonic()


class ManualClock(Clock):
    """A clock driven explicitly by the test or simulator."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("clock cannot move backwards")
        self._now += seconds
        return self._now

    def set(self, timestamp: float) -> float:
        if timestamp < self._now:
            raise ValueError("clock cannot move backwards")
        self._now = float(timestamp)
        return self._now
