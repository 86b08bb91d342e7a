from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """Everything needed to replay one CLI run."""

    subcommand: str
    argv: List[str]
    flags: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)  # path -> sha256 hex
    outputs: List[str] = Field(default_factory=list)
    version: str
    status: str = "succeeded"
    started_at: datetime
    finished_at: Optional[datetime] = None
    duration_seconds: Optional[float] = None
    error: Optional[str] = None
