from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from gqe.db import models as db_models
from gqe.models.manifest import RunManifest


def create_run(db: Session, manifest: RunManifest) -> db_models.RunRecord:
    """
    Record one finished CLI run.
    """
    record = db_models.RunRecord(
        command=manifest.subcommand,
        status=manifest.status,
        started_at=manifest.started_at,
        finished_at=manifest.finished_at,
        manifest=manifest.model_dump(mode="json"),
    )
    db.add(record)
    db.commit()
    db.refresh(record)
    return record


def get_runs(db: Session, command: Optional[str] = None, skip: int = 0, limit: int = 100) -> List[db_models.RunRecord]:
    """
    Recorded runs, newest first, optionally for one subcommand.
    """
    stmt = select(db_models.RunRecord)
    if command is not None:
        stmt = stmt.filter(db_models.RunRecord.command == command)
    stmt = stmt.order_by(db_models.RunRecord.id.desc()).offset(skip).limit(limit)
    return list(db.execute(stmt).scalars().all())
