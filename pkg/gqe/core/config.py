import os
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Tool settings loaded from environment variables (prefix ``GQE_``)."""

    # Runtime
    log_level: str = "INFO"
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    seed: int = Field(default=0, ge=0)

    # Run registry; disabled when unset
    registry_url: Optional[str] = None

    # Expansion defaults
    default_k: int = Field(default=44, ge=1)
    default_levels: int = Field(default=2, ge=1)
    synth_noise_sigma: float = Field(default=0.2, gt=0)

    model_config = SettingsConfigDict(env_prefix="GQE_", env_file=".env", extra="ignore")


settings = Settings()
