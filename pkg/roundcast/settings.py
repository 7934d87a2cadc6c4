from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

DATA_DIR_ENV = "ROUNDCAST_DATA_DIR"
OUTPUT_DIR_ENV = "ROUNDCAST_OUTPUT_DIR"
LOG_LEVEL_ENV = "ROUNDCAST_LOG_LEVEL"


class Settings(BaseModel):
    data_dir: Optional[Path] = Field(
        default=None, description="Dataset directory for commands that read CSVs."
    )
    output_dir: Path = Field(default=Path("runs"))
    log_level: str = "INFO"


@lru_cache()
def get_settings() -> Settings:
    # .env.local wins over .env; neither overrides the real environment.
    load_dotenv(".env.local")
    load_dotenv()
    data_dir = os.getenv(DATA_DIR_ENV)
    return Settings(
        data_dir=Path(data_dir) if data_dir else None,
        output_dir=Path(os.getenv(OUTPUT_DIR_ENV, "runs")),
        log_level=os.getenv(LOG_LEVEL_ENV, "INFO").upper(),
    )
