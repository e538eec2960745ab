"""harness.config

Process-level runtime settings loaded from environment variables.
Experiment hyper-parameters live in sunet.models; these only steer the run.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv


@dataclass(frozen=True)
class HarnessSettings:
    """Runtime settings used by the CLI and the cross-validation driver."""

    log_level: int
    workers: int
    out_dir: Path
    run_slow: bool


def _log_level(value: str) -> int:
    level = logging.getLevelName(value.strip().upper())
    if not isinstance(level, int):
        raise ValueError(f"SUNET_LOG_LEVEL must be a logging level name, got {value!r}")
    return level


def load_settings() -> HarnessSettings:
    """Load settings from .env and process environment variables."""
    load_dotenv()
    workers = int(os.environ.get("SUNET_WORKERS", "1"))
    if workers < 1:
        raise ValueError(f"SUNET_WORKERS must be >= 1, got {workers}")
    return HarnessSettings(
        log_level=_log_level(os.environ.get("SUNET_LOG_LEVEL", "INFO")),
        workers=workers,
        out_dir=Path(os.environ.get("SUNET_OUT_DIR", "runs")),
        run_slow=bool(os.environ.get("SUNET_RUN_SLOW")),
    )
