# dccrn_kws/settings.py

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process environment (prefix ``DCCRN_KWS_``)."""

    model_config = SettingsConfigDict(env_prefix="DCCRN_KWS_", extra="ignore")

    config_dir: Optional[Path] = None
    log_level: str = "INFO"
    num_threads: Optional[int] = None


settings = Settings()

if settings.config_dir is not None and not settings.config_dir.is_dir():
    logger.warning(
        f"DCCRN_KWS_CONFIG_DIR={settings.config_dir} is not a directory. "
        "Config names will only resolve relative to the working directory."
    )


def resolve_config_path(name: str | os.PathLike) -> Path:
    """Find a config file by path, falling back to the configured directory."""
    path = Path(name)
    if path.exists() or path.is_absolute() or settings.config_dir is None:
        return path
    candidate = settings.config_dir / path
    return candidate if candidate.exists() else path
