"""Sine/cosine encodings of calendar position.

Each feature maps a timestamp to a fractional cyclic value ``v`` in
``[0, T)`` and emits ``(sin(2*pi*v/T), cos(2*pi*v/T))``.

Timestamps are integer seconds of naive wall-clock time since
1970-01-01T00:00:00.
"""

from __future__ import annotations

import numpy as np

PERIODS = {
    "hour_of_day": 24.0,
    "day_of_week": 7.0,
    "day_of_month": 31.0,
    "month_of_year": 12.0,
}

# "day" and "week" are ambiguous in the usual {hour, day, week, month} list;
# both readings resolve to day-of-week here and day-of-month stays explicit.
ALIASES = {
    "hour": "hour_of_day",
    "day": "day_of_week",
    "week": "day_of_week",
    "month": "month_of_year",
}

DEFAULT_FEATURES = ("hour_of_day", "day_of_week")

_DAY = 86400


def canonical(features) -> tuple[str, ...]:
    out = []
    for f in features:
        name = ALIASES.get(f, f)
        if name not in PERIODS:
            raise ValueError(f"unknown calendar feature {f!r}; choose from {sorted(PERIODS)}")
        out.append(name)
    return tuple(out)


def weekday_index(timestamps) -> np.ndarray:
    """Integer day of week, Monday = 0."""
    days = np.floor_divide(np.asarray(timestamps, dtype=np.int64), _DAY)
    # 1970-01-01 was a Thursday
    return np.mod(days + 3, 7)


def cyclic_value(timestamps, feature: str) -> np.ndarray:
    """Fractional position of each timestamp within the feature's cycle."""
    ts = np.asarray(timestamps, dtype=np.int64)
    feature = canonical([feature])[0]
    seconds_of_day = np.mod(ts, _DAY)
    frac_day = seconds_of_day / _DAY
    if feature == "hour_of_day":
        return seconds_of_day / 3600.0
    days = np.floor_divide(ts, _DAY)
    if feature == "day_of_week":
        return weekday_index(ts) + frac_day
    dt = days.astype("datetime64[D]")
    month_start = dt.astype("datetime64[M]")
    if feature == "day_of_month":
        return (dt - month_start.astype("datetime64[D]")).astype(np.int64) + frac_day
    # month_of_year
    next_month = (month_start + 1).astype("datetime64[D]")
    month_len = (next_month - month_start.astype("datetime64[D]")).astype(np.int64)
    into = (dt - month_start.astype("datetime64[D]")).astype(np.int64) + frac_day
    month_index = month_start.astype(np.int64) % 12
    return month_index + into / month_len


def calendar_matrix(timestamps, features=DEFAULT_FEATURES) -> np.ndarray:
    """Encode an array of timestamps; output has a trailing axis of 2*len(features)."""
    ts = np.asarray(timestamps, dtype=np.int64)
    cols = []
    for f in canonical(features):
        angle = cyclic_value(ts, f) * (2.0 * np.pi / PERIODS[f])
        cols.append(np.sin(angle))
        cols.append(np.cos(angle))
    if not cols:
        return np.zeros(ts.shape + (0,))
    return np.stack(cols, axis=-1)


def calendar_encoding(t: int, features=DEFAULT_FEATURES) -> np.ndarray:
    """Encode one timestamp as ``[sin_f1, cos_f1, sin_f2, cos_f2, ...]``."""
    return calendar_matrix(np.array([t]), features)[0]
