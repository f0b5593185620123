"""
Run registry database initialization and session management
"""
from pathlib import Path
import logging

from sqlalchemy import create_engine, event
from sqlalchemy.orm import sessionmaker, declarative_base

from config import REGISTRY_URL

logger = logging.getLogger(__name__)

Base = declarative_base()


class DatabaseManager:
    """Manages the registry connection and sessions"""

    _engine = None
    _SessionLocal = None
    _url = None

    @classmethod
    def initialize(cls, url=None):
        """Connect to the registry (default: the runs root) and create tables"""
        url = url or REGISTRY_URL
        if cls._engine is not None and url == cls._url:
            return
        cls.close()
        try:
            if url.startswith("sqlite:///"):
                Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
            cls._engine = create_engine(
                url,
                echo=False,
                connect_args={"check_same_thread": False}
            )

            # Enable foreign keys for SQLite so question rows cascade with their run
            @event.listens_for(cls._engine, "connect")
            def set_sqlite_pragma(dbapi_conn, connection_record):
                cursor = dbapi_conn.cursor()
                cursor.execute("PRAGMA foreign_keys=ON")
                cursor.close()

            # Import models so their tables are registered on Base
            import database.models  # noqa: F401

            Base.metadata.create_all(bind=cls._engine)
            cls._SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=cls._engine)
            cls._url = url
            logger.info(f"Run registry initialized at {url}")

        except Exception as e:
            logger.error(f"Failed to initialize run registry: {e}")
            raise

    @classmethod
    def get_session(cls):
        """Get a new database session"""
        if cls._SessionLocal is None:
            cls.initialize()
        return cls._SessionLocal()

    @classmethod
    def close(cls):
        """Close database connection"""
        if cls._engine:
            cls._engine.dispose()
            logger.info("Run registry connection closed")
        cls._engine = None
        cls._SessionLocal = None
        cls._url = None


__all__ = ['Base', 'DatabaseManager']
