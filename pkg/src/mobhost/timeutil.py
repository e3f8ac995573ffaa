"""UTC millisecond instants and their ISO-8601 text form."""

from __future__ import annotations

import re
import time
from datetime import datetime, timedelta, timezone
from typing import Callable

Clock = Callable[[], int]

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_ISO = re.compile(r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d{1,3}))?Z$")


def format_instant(ms: int) -> str:
    dt = _EPOCH + timedelta(milliseconds=ms)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


def parse_instant(text: str) -> int:
    m = _ISO.match(text)
    if not m:
        raise ValueError(f"not an ISO-8601 UTC instant: {text!r}")
    y, mo, d, h, mi, s, frac = m.groups()
    dt = datetime(int(y), int(mo), int(d), int(h), int(mi), int(s), tzinfo=timezone.utc)
    millis = int((frac or "0").ljust(3, "0"))
    delta = dt - _EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1000 + millis


def system_clock() -> int:
    return time.time_ns() // 1_000_000


def fixed_clock(ms: int) -> Clock:
    return lambda: ms
