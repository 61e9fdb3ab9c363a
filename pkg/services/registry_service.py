import logging
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional

from sqlalchemy.orm import Session

from database.db import Base, SessionLocal, engine
from database.models import ExperimentRun as DBExperimentRun, RunMetric as DBRunMetric
from models.schemas import RunRecord, RunStatus

# Set up logger
logger = logging.getLogger(__name__)

# The registry is a side channel: every public function logs and swallows its own failures.

_tables_ready = False


def init_registry(bind=None) -> bool:
    """Create the registry tables if missing."""
    global _tables_ready
    try:
        Base.metadata.create_all(bind=bind or engine)
        _tables_ready = True
        return True
    except Exception as e:
        logger.error(f"Could not initialise run registry: {str(e)}")
        return False


def _session(factory: Optional[Callable[[], Session]]) -> Session:
    if factory is None and not _tables_ready:
        init_registry()
    return (factory or SessionLocal)()


def _to_record(run: DBExperimentRun) -> RunRecord:
    return RunRecord(
        id=run.id,
        command=run.command,
        seed=run.seed,
        config_hash=run.config_hash,
        code_version=run.code_version,
        out_dir=run.out_dir,
        status=RunStatus(run.status),
        exit_code=run.exit_code,
        started_at=run.started_at,
        finished_at=run.finished_at,
        metrics={m.name: m.value for m in run.metrics},
    )


def start_run(command: str, seed: int, config_hash: Optional[str] = None, code_version: Optional[str] = None,
              out_dir: Optional[str] = None, session_factory=None) -> Optional[int]:
    db = None
    try:
        db = _session(session_factory)
        run = DBExperimentRun(command=command, seed=seed, config_hash=config_hash, code_version=code_version,
                              out_dir=out_dir, status=RunStatus.RUNNING.value,
                              started_at=datetime.now(timezone.utc))
        db.add(run)
        db.commit()
        db.refresh(run)
        logger.debug(f"Registered run {run.id} ({command}, seed {seed})")
        return run.id
    except Exception as e:
        logger.error(f"Failed to register run for {command}: {str(e)}")
        if db is not None:
            db.rollback()
        return None
    finally:
        if db is not None:
            db.close()


def record_metrics(run_id: Optional[int], metrics: Dict[str, float], session_factory=None) -> bool:
    if run_id is None or not metrics:
        return False
    db = None
    try:
        db = _session(session_factory)
        for name, value in metrics.items():
            db.add(DBRunMetric(run_id=run_id, name=name, value=float(value)))
        db.commit()
        return True
    except Exception as e:
        logger.error(f"Failed to record metrics for run {run_id}: {str(e)}")
        if db is not None:
            db.rollback()
        return False
    finally:
        if db is not None:
            db.close()


def finish_run(run_id: Optional[int], status: RunStatus, exit_code: int, session_factory=None) -> bool:
    if run_id is None:
        return False
    db = None
    try:
        db = _session(session_factory)
        run = db.query(DBExperimentRun).filter(DBExperimentRun.id == run_id).first()
        if not run:
            logger.warning(f"Run {run_id} not found in registry")
            return False
        run.status = RunStatus(status).value
        run.exit_code = exit_code
        run.finished_at = datetime.now(timezone.utc)
        db.commit()
        return True
    except Exception as e:
        logger.error(f"Failed to finish run {run_id}: {str(e)}")
        if db is not None:
            db.rollback()
        return False
    finally:
        if db is not None:
            db.close()


def list_runs(limit: int = 20, command: Optional[str] = None, session_factory=None) -> List[RunRecord]:
    """Most recent runs first."""
    db = None
    try:
        db = _session(session_factory)
        query = db.query(DBExperimentRun)
        if command:
            query = query.filter(DBExperimentRun.command == command)
        runs = query.order_by(DBExperimentRun.id.desc()).limit(limit).all()
        return [_to_record(run) for run in runs]
    except Exception as e:
        logger.error(f"Failed to list runs: {str(e)}")
        return []
    finally:
        if db is not None:
            db.close()
