"""
Application Settings

WHAT: Central runtime settings for the CLI and library defaults
WHY: Every run must be reproducible from its printed effective config
HOW: Environment (optionally from a .env file) -> pydantic Settings, cached
"""

import os
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, Field

DEFAULT_SEED = 7
DEFAULT_PROFILES = str(Path(__file__).resolve().parents[2] / "data" / "profiles.json")


class Settings(BaseModel):
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)
    jobs: int = Field(default=1, ge=1)
    workdir: str = "corpus"
    profiles_path: str = DEFAULT_PROFILES
    log_level: str = "INFO"


@lru_cache()
def get_settings() -> Settings:
    """
    Build settings from PEGUARD_* environment variables.
    Seeds never come from the wall clock.
    """
    load_dotenv()

    return Settings(
        seed=int(os.getenv("PEGUARD_SEED", DEFAULT_SEED)),
        jobs=int(os.getenv("PEGUARD_JOBS", 1)),
        workdir=os.getenv("PEGUARD_WORKDIR", "corpus"),
        profiles_path=os.getenv("PEGUARD_PROFILES", DEFAULT_PROFILES),
        log_level=os.getenv("PEGUARD_LOG_LEVEL", "INFO").upper(),
    )
