import os
import logging
from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

# Set up logger
logger = logging.getLogger(__name__)

load_dotenv()

# Run registry location; any SQLAlchemy URL works, SQLite file by default
DATABASE_URL = os.getenv("SDFLOW_DATABASE_URL", "sqlite:///sdflow_runs.db")

db_url_parts = DATABASE_URL.split('@')
if len(db_url_parts) > 1:
    logger.debug(f"Run registry at: {db_url_parts[0].split('://')[0]}://*****@{db_url_parts[1]}")
else:
    logger.debug(f"Run registry at: {DATABASE_URL}")


def make_engine(url: str):
    if url.startswith("sqlite"):
        # In-memory SQLite must share one connection across threads
        if url in ("sqlite://", "sqlite:///:memory:"):
            return create_engine(url, connect_args={"check_same_thread": False}, poolclass=StaticPool)
        return create_engine(url, connect_args={"check_same_thread": False})
    return create_engine(url, pool_size=5, max_overflow=10, pool_timeout=30, pool_recycle=1800)


engine = make_engine(DATABASE_URL)

# Create session factory
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

# Create base class for declarative models
Base = declarative_base()


def get_db():
    """Yield a registry session, rolling back on error and always closing it."""
    db = SessionLocal()
    try:
        yield db
    except Exception as e:
        logger.error(f"Registry session error: {str(e)}")
        db.rollback()
        raise
    finally:
        db.close()
