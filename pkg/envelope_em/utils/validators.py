"""
Input validation utilities
"""
import itertools
from typing import List, Optional, Union

from envelope_em.errors import InvalidConfig

MISSING_TOKENS = {"", "na", "nan"}

SELECTION_METHODS = ["bicq", "bootstrap"]
PREDICTOR_MODELS = ["normal", "bernoulli"]
OUTPUT_FORMATS = ["json", "table"]


def missing_token_variants() -> List[str]:
    """Every capitalisation of the missing tokens, as pandas na_values."""
    variants = set()
    for token in MISSING_TOKENS:
        for letters in itertools.product(*[(c.lower(), c.upper()) for c in token]):
            variants.add("".join(letters))
    return sorted(variants)


def parse_column_list(
value: Union[str, List[str], None]) -> List[str]:
    """Split a comma-separated column list, dropping blanks."""
    if value is None:
        return []
    if isinstance(value, str):
        items = value.split(",")
    else:
        items = list(value)
    return [item.strip() for item in items if item and item.strip()]


def validate_u(value: Union[str, int, None]) -> Optional[int]:
    """
    Validate and normalize the envelope dimension

    Returns:
        A non-negative int, or None for "auto"
    """
    if value is None:
        return None
    if isinstance(value, int):
        if value < 0:
            raise InvalidConfig(f"u must be >= 0, got {value}")
        return value
    text = str(value).strip().lower()
    if text in ("", "auto"):
        return None
    try:
        parsed = int(text)
    except ValueError:
        raise InvalidConfig(f"u must be an integer or 'auto', got {value!r}")
    if parsed < 0:
        raise InvalidConfig(f"u must be >= 0, got {parsed}")
    return parsed


def validate_choice(value: Optional[str], choices: List[str], name: str, default: str) -> str:
    """Case-insensitive match against the valid values."""
    if value is None or not str(value).strip():
        return default
    text = str(value).strip().lower()
    for valid in choices:
        if text == valid.lower():
            return valid
    raise InvalidConfig(f"{name} must be one of {', '.join(choices)}, got {value!r}")


def validate_positive(value, name: str, integer: bool = False):
    try:
        parsed = int(value) if integer else float(value)
    except (TypeError, ValueError):
        raise InvalidConfig(f"{name} must be a number, got {value!r}")
    if parsed <= 0:
        raise InvalidConfig(f"{name} must be > 0, got {value!r}")
    return parsed
