"""
Configuration management for ssmnd.
Process-level settings come from environment variables (a .env file is loaded by the CLI).
"""

import os
from dataclasses import dataclass
from functools import lru_cache


@dataclass
class Settings:
    """Process settings loaded from environment variables."""

    # Worker threads for micro-batch gradients
    threads: int = 1

    # Logging
    log_level: str = "INFO"

    # Outputs
    runs_dir: str = "runs"
    checkpoint_dtype: str = "float32"

    # Data paths
    presets_dir: str = ""
    schemas_dir: str = ""


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        return default


@lru_cache()
def get_settings() -> Settings:
    """Load settings from environment variables (cached singleton)."""
    base_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

    checkpoint_dtype = os.getenv("SSMND_CHECKPOINT_DTYPE", "float32")
    if checkpoint_dtype not in ("float32", "float64"):
        checkpoint_dtype = "float32"

    settings = Settings(
        threads=_int_env("SSMND_THREADS", 1),
        log_level=os.getenv("SSMND_LOG_LEVEL", "INFO").upper(),
        runs_dir=os.getenv("SSMND_RUNS_DIR", "runs"),
        checkpoint_dtype=checkpoint_dtype,
        presets_dir=os.path.join(base_dir, "data", "presets"),
        schemas_dir=os.path.join(base_dir, "packages", "shared", "schemas"),
    )

    return settings
