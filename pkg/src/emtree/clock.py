"""Integer-second UTC timestamps, durations, and injectable clocks."""

from __future__ import annotations

import time
from datetime import datetime, timezone

# Timestamps are plain integer seconds since the epoch (UTC); durations are
# integer seconds. Keeping both as ints makes arithmetic total and exact.
Timestamp = int
Duration = int

MINUTE: Duration = 60
HOUR: Duration = 3600
DAY: Duration = 86400


def ts(year: int, month: int, day: int, hour: int = 0, minute: int = 0, second: int = 0) -> Timestamp:
    return int(datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc).timestamp())


def fmt_ts(t: Timestamp, seconds: bool = True) -> str:
    """Render a timestamp as "2024/04/24 09:00:13" (UTC)."""
    dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
    pattern = "%Y/%m/%d %H:%M:%S" if seconds else "%Y/%m/%d %H:%M"
    return dt.strftime(pattern)


def fmt_span(start: Timestamp, end: Timestamp, seconds: bool = False) -> str:
    """Render a time range, collapsing the date when both ends share a day.

    Same-day spans look like "2024/04/24 09:00–09:20"; spans crossing
    midnight repeat the full date on both sides.
    """
    a = datetime.fromtimestamp(int(start), tz=timezone.utc)
    b = datetime.fromtimestamp(int(end), tz=timezone.utc)
    clock = "%H:%M:%S" if seconds else "%H:%M"
    if a.date() == b.date():
        return f"{a.strftime('%Y/%m/%d')} {a.strftime(clock)}–{b.strftime(clock)}"
    return f"{a.strftime('%Y/%m/%d')} {a.strftime(clock)} – {b.strftime('%Y/%m/%d')} {b.strftime(clock)}"


def parse_ts(text: str) -> Timestamp:
    """Parse "2024/04/24 09:00[:13]" or ISO-8601 into a timestamp."""
    text = text.strip()
    for pattern in ("%Y/%m/%d %H:%M:%S", "%Y/%m/%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d"):
        try:
            return int(datetime.strptime(text, pattern).replace(tzinfo=timezone.utc).timestamp())
        except ValueError:
            continue
    raise ValueError(f"unrecognized timestamp: {text!r}")


class Clock:
    """Wall clock. Subclass or swap for a VirtualClock in replays and tests."""

    def now(self) -> Timestamp:
        return int(time.time())


class VirtualClock(Clock):
    """Manually advanced clock so evaluation replays compress days into seconds."""

    def __init__(self, start: Timestamp = 0):
        self._now = int(start)

    def now(self) -> Timestamp:
        return self._now

    def set(self, t: Timestamp) -> None:
        if t < self._now:
            raise ValueError("virtual clock cannot move backwards")
        self._now = int(t)

    def advance(self, seconds: Duration) -> Timestamp:
        self.set(self._now + int(seconds))
        return self._now
