"""
Input validation for command-line arguments and file paths
"""

import math
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

from exceptions import ValidationError
from logger_config import get_logger

logger = get_logger(__name__)

SCENARIO_SUFFIXES = (".json", ".toml")
TRACE_SUFFIXES = (".jsonl", ".json")
MAX_REPEAT = 100000


def validate_input_file(path: str, suffixes: Iterable[str]) -> Tuple[bool, Optional[str]]:
    """
    Validate a file the CLI is about to read

    Args:
        path: Path string from the command line
        suffixes: Accepted extensions

    Returns:
        Tuple of (is_valid, error_message)
    """
    if not path or not path.strip():
        return False, "Path cannot be empty"
    if "\x00" in path:
        return False, "Path contains null bytes"
    target = Path(path)
    if not target.is_file():
        return False, f"No such file: {path}"
    allowed = tuple(s.lower() for s in suffixes)
    if allowed and target.suffix.lower() not in allowed:
        logger.warning(f"Unexpected extension {target.suffix!r} for {path}; expected one of {allowed}")
    return True, None


def validate_seed(seed: int) -> Tuple[bool, Optional[str]]:
    if seed < 0:
        return False, f"Seed must be >= 0, got {seed}"
    return True, None


def validate_duration(duration: Optional[float]) -> Tuple[bool, Optional[str]]:
    if duration is None:
        return True, None
    if not math.isfinite(duration) or duration <= 0:
        return False, f"Duration must be a positive number, got {duration}"
    return True, None


def validate_repeat(repeat: Optional[int]) -> Tuple[bool, Optional[str]]:
    if repeat is None:
        return True, None
    if repeat < 1 or repeat > MAX_REPEAT:
        return False, f"Repeat must lie in [1, {MAX_REPEAT}], got {repeat}"
    return True, None


def validate_workers(workers: Optional[int]) -> Tuple[bool, Optional[str]]:
    if workers is None:
        return True, None
    if workers < 1:
        return False, f"Workers must be >= 1, got {workers}"
    return True, None


def parse_float_list(text: str) -> List[float]:
    """Comma-separated numbers, as given to --alphas"""
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ValidationError(f"Expected comma-separated numbers, got {text!r}") from e
    if not values:
        raise ValidationError("List cannot be empty")
    return values


def parse_int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ValidationError(f"Expected comma-separated integers, got {text!r}") from e
    if not values:
        raise ValidationError("List cannot be empty")
    return values


def sanitize_output_path(path: str, default_name: str) -> Path:
    """
    Resolve an output path; a directory gets default_name appended

    Args:
        path: Output path from the command line
        default_name: File name used when path is a directory

    Returns:
        Path whose parent directory exists
    """
    target = Path(path)
    if target.is_dir() or path.endswith(("/", "\\")):
        target = target / default_name
    name = "".join(c for c in target.name if c.isprintable() and c not in '<>:"|?*')
    if not name or name in (".", ".."):
        name = default_name
    target = target.with_name(name[:255])
    target.parent.mkdir(parents=True, exist_ok=True)
    return target
