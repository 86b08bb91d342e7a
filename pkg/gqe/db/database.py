from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

# Base class for the registry tables.
Base = declarative_base()


def make_session_factory(url: str) -> sessionmaker:
    """Engine plus session factory for a registry URL; tables are created on first use."""
    # connect_args is needed only for SQLite.
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args)
    Base.metadata.create_all(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)
