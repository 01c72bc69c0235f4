"""
Core configuration management for the churn register simulator
Handles environment variables and run defaults
"""

import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from dotenv import load_dotenv

from exceptions import ConfigurationError

load_dotenv()


def _env_bool(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() in ("1", "true", "yes")


@dataclass
class Config:
    """Simulator configuration"""

    # Logging
    log_level: str = field(default_factory=lambda: os.getenv("ABCC_LOG_LEVEL", "INFO"))
    log_file: Optional[str] = field(default_factory=lambda: os.getenv("ABCC_LOG_FILE") or None)

    # Parameter engine
    ns_min_cap: int = field(default_factory=lambda: int(os.getenv("ABCC_NS_MIN_CAP", "1000000")))

    # Checker
    search_cap: int = field(default_factory=lambda: int(os.getenv("ABCC_SEARCH_CAP", "12")))
    audit_max_i: int = field(default_factory=lambda: int(os.getenv("ABCC_AUDIT_MAX_I", "8")))

    # Engine
    delay_epsilon: float = field(default_factory=lambda: float(os.getenv("ABCC_DELAY_EPSILON", "1e-6")))
    drain_factor: float = field(default_factory=lambda: float(os.getenv("ABCC_DRAIN_FACTOR", "8")))
    trace_payloads: bool = field(default_factory=lambda: _env_bool("ABCC_TRACE_PAYLOADS"))

    # Batch runs
    workers: int = field(default_factory=lambda: int(os.getenv("ABCC_WORKERS", "1")))

    def validate(self) -> None:
        """Reject values no run could use"""
        if self.ns_min_cap < 1:
            raise ConfigurationError("ABCC_NS_MIN_CAP must be >= 1")
        if self.search_cap < 1:
            raise ConfigurationError("ABCC_SEARCH_CAP must be >= 1")
        if self.audit_max_i < 1:
            raise ConfigurationError("ABCC_AUDIT_MAX_I must be >= 1")
        if not 0.0 < self.delay_epsilon < 1.0:
            raise ConfigurationError("ABCC_DELAY_EPSILON must lie in (0, 1)")
        if self.drain_factor < 0:
            raise ConfigurationError("ABCC_DRAIN_FACTOR must be >= 0")
        if self.workers < 1:
            raise ConfigurationError("ABCC_WORKERS must be >= 1")


@lru_cache(maxsize=1)
def get_config() -> Config:
    """Get singleton configuration instance"""
    try:
        config = Config()
    except ValueError as e:
        raise ConfigurationError(f"Invalid environment setting: {e}") from e
    config.validate()
    return config
