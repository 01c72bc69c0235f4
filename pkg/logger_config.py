"""
Logging for the simulator

All records go under the abcc_sim package logger and are written to stderr,
so CLI output on stdout stays machine-readable. Engine records can be tagged
with the run seed and virtual time through RunLogAdapter.
"""

import logging
import sys
from pathlib import Path
from typing import Callable, Optional

ROOT_LOGGER_NAME = "abcc_sim"
DEFAULT_FORMAT = "%(asctime)s - %(processName)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(
    log_level: Optional[str] = None,
    log_file: Optional[str] = None,
    log_format: Optional[str] = None
) -> logging.Logger:
    """
    Configure the package logger; calling again replaces earlier handlers

    Args:
        log_level: Level name; defaults to ABCC_LOG_LEVEL
        log_file: Extra file destination; defaults to ABCC_LOG_FILE
        log_format: Record format; the default names the process so
            batch runs on a worker pool can be told apart

    Returns:
        The abcc_sim logger
    """
    if log_level is None or log_file is None:
        from app_config import get_config
        settings = get_config()
        log_level = log_level or settings.log_level
        log_file = log_file if log_file is not None else settings.log_file

    formatter = logging.Formatter(log_format or DEFAULT_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
    root = logging.getLogger(ROOT_LOGGER_NAME)
    root.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(path, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    return root


def get_logger(name: str) -> logging.Logger:
    """Module logger under the package root (pass __name__)"""
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


class RunLogAdapter(logging.LoggerAdapter):
    """Prefixes each record with the run seed and the current virtual time"""

    def __init__(self, logger: logging.Logger, seed: int, clock: Callable[[], float]):
        super().__init__(logger, {"seed": seed})
        self.clock = clock

    def process(self, msg, kwargs):
        return f"[seed {self.extra['seed']} t={self.clock():.4f}] {msg}", kwargs
