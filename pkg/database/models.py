from sqlalchemy import Column, Integer, String, DateTime, Float, ForeignKey
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func

from database.db import Base
from models.schemas import RunStatus


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(50), nullable=False)
    seed = Column(Integer, nullable=False)
    config_hash = Column(String(64))
    code_version = Column(String(64))
    out_dir = Column(String(1024))
    status = Column(String(20), nullable=False, default=RunStatus.RUNNING.value)
    exit_code = Column(Integer)
    started_at = Column(DateTime(timezone=True), server_default=func.now())
    finished_at = Column(DateTime(timezone=True))

    metrics = relationship("RunMetric", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<ExperimentRun(id={self.id}, command='{self.command}', seed={self.seed}, status={self.status})>"


class RunMetric(Base):
    __tablename__ = "run_metrics"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("experiment_runs.id"), nullable=False, index=True)
    name = Column(String(100), nullable=False)
    value = Column(Float, nullable=False)

    run = relationship("ExperimentRun", back_populates="metrics")

    def __repr__(self):
        return f"<RunMetric(run_id={self.run_id}, name='{self.name}', value={self.value})>"
