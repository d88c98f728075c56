"""
Runtime settings and logging setup.

Settings come from the environment; a local ``.env`` file is loaded first.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    log_level: str = "INFO"
    workers: int = 1
    model_dir: Path = Path("models")
    seed: int = 0


def get_settings() -> Settings:
    """Read settings from ``TOPONETS_*`` environment variables."""
    workers = int(os.getenv("TOPONETS_WORKERS", "1"))
    return Settings(
        log_level=os.getenv("TOPONETS_LOG_LEVEL", "INFO").upper(),
        workers=max(1, workers),
        model_dir=Path(os.getenv("TOPONETS_MODEL_DIR", "models")),
        seed=int(os.getenv("TOPONETS_SEED", "0")),
    )


def configure_logging(level: str = None) -> None:
    level = level or get_settings().log_level
    root = logging.getLogger("toponets")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)
