"""
General utility functions.

Provides date/time helpers, validation predicates, and the rounding rule
shared by every quantizer.
"""
from __future__ import annotations

import datetime as dt
import math
from typing import Any, Optional

import numpy as np

UTC = dt.timezone.utc


def utcnow() -> dt.datetime:
    return dt.datetime.now(tz=UTC)


def dt_to_iso(value: Optional[dt.datetime]) -> Optional[str]:
    if value is None:
        return None
    value = value.astimezone(UTC).replace(microsecond=0)
    return value.isoformat().replace("+00:00", "Z")


def is_int(value: Any) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def is_real(value: Any) -> bool:
    if isinstance(value, bool):
        return False
    return isinstance(value, (int, float, np.integer, np.floating)) and math.isfinite(float(value))


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Nearest-integer rounding with ties away from zero (numpy rounds ties to even)."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def finite_or_none(value: float) -> Optional[float]:
    """JSON has no Infinity; lossless cases (infinite SQNR) are reported as null."""
    value = float(value)
    return value if math.isfinite(value) else None
