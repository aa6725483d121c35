"""Injected time sources. All timestamps are integer milliseconds."""

from __future__ import annotations

import time


class VirtualClock:
    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"virtual time cannot go backwards ({t} < {self._now})")
        self._now = t

    def advance(self, ms: int) -> None:
        self.advance_to(self._now + ms)

    virtual = True


class WallClock:
    """Monotonic milliseconds since construction. advance_to sleeps."""

    virtual = False

    def __init__(self):
        self._origin = time.monotonic()

    def now(self) -> int:
        return int((time.monotonic() - self._origin) * 1000)

    def advance_to(self, t: int) -> None:
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay / 1000)

    def advance(self, ms: int) -> None:
        self.advance_to(self.now() + ms)

    @staticmethod
    def wall() -> float:
        return time.time()
