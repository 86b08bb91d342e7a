from sqlalchemy import JSON, Column, DateTime, Integer, String

from gqe.db.database import Base


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String, index=True)
    status = Column(String)  # succeeded, failed
    started_at = Column(DateTime)
    finished_at = Column(DateTime, nullable=True)
    manifest = Column(JSON)
