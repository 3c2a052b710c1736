from __future__ import annotations

import datetime as _dt
from typing import NamedTuple

from .errors import DateError


class TimeStamp6D(NamedTuple):
    """Capture time as the six calendar fields (Gregorian, no timezone)."""

    year: int
    month: int
    day: int
    hour: int = 0
    minute: int = 0
    second: int = 0

    def validate(self) -> TimeStamp6D:
        try:
            _dt.datetime(*self)
        except (TypeError, ValueError) as exc:
            raise DateError(f"invalid timestamp {tuple(self)}: {exc}") from None
        return self

    @classmethod
    def from_datetime(cls, value: _dt.datetime | _dt.date) -> TimeStamp6D:
        if isinstance(value, _dt.datetime):
            return cls(value.year, value.month, value.day, value.hour, value.minute, value.second)
        return cls(value.year, value.month, value.day)

    @classmethod
    def parse(cls, text: str) -> TimeStamp6D:
        """Parse ISO 8601 dates such as ``2021-06-01`` or ``2021-06-01T10:30:00Z``."""
        text = text.strip()
        if text.endswith("Z"):
            text = text[:-1]
        try:
            value = _dt.datetime.fromisoformat(text)
        except ValueError as exc:
            raise DateError(f"cannot parse timestamp {text!r}: {exc}") from None
        return cls.from_datetime(value)

    def isoformat(self) -> str:
        return _dt.datetime(*self).isoformat()
