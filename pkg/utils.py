import logging
import os
from typing import Iterable

from errors import ConfigurationError

VALID_LEVELS = (1, 2, 3, 4)


def _get_int_env(key: str, default: int) -> int:
    val = os.getenv(key)

    if val is None or val == "":
        return default

    return int(val)


def _get_float_env(key: str, default: float) -> float:
    val = os.getenv(key)

    if val is None or val == "":
        return default

    return float(val)


def parse_levels(value: str | Iterable[int]) -> tuple[int, ...]:
    """Parse ``"1,2,3,4"`` (or ``"L=1,4"``) into a sorted tuple of stage levels."""
    if isinstance(value, str):
        text = value.strip()
        if text.upper().startswith("L="):
            text = text[2:]
        items = [item.strip() for item in text.split(",") if item.strip()]
        try:
            levels = [int(item) for item in items]
        except ValueError:
            raise ConfigurationError(f"levels must be integers, got '{value}'")
    else:
        levels = [int(item) for item in value]

    if not levels:
        raise ConfigurationError("level set must not be empty")
    bad = [level for level in levels if level not in VALID_LEVELS]
    if bad:
        raise ConfigurationError(f"levels must be in {{1,2,3,4}}, got {bad}")
    return tuple(sorted(set(levels)))


def format_levels(levels: Iterable[int]) -> str:
    return "L=" + ",".join(str(level) for level in sorted(levels))


def coerce_positive_int(value: object, default: int, name: str = "value") -> int:
    if value in (None, ""):
        return default

    try:
        parsed = int(value)
    except (TypeError, ValueError):
        logging.warning(f"Invalid {name} value '{value}', falling back to {default}.")
        return default

    if parsed < 1:
        logging.warning(f"Non-positive {name} value '{value}', falling back to {default}.")
        return default

    return parsed
