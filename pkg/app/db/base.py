import uuid
from sqlalchemy import Column, String, Float, DateTime, ForeignKey, Boolean, Integer, Text
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func
from .session import Base


class Run(Base):
    __tablename__ = "runs"
    id = Column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    command = Column(String, nullable=False)  # Ex: train-teacher, infer, eval
    run_dir = Column(String, nullable=False)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)

    # Status: 'RUNNING', 'DONE', 'FAILED'
    status = Column(String, default="RUNNING")
    error = Column(Text, nullable=True)

    metrics = relationship("CaseMetric", back_populates="run", cascade="all, delete-orphan")
    efficiency = relationship("CaseEfficiency", back_populates="run", cascade="all, delete-orphan")
    criado_em = Column(DateTime(timezone=True), server_default=func.now())
    finalizado_em = Column(DateTime(timezone=True), nullable=True)


class CaseMetric(Base):
    __tablename__ = "case_metrics"
    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(36), ForeignKey("runs.id"), nullable=False, index=True)
    case_id = Column(String, nullable=False)
    class_id = Column(Integer, nullable=False)
    dsc = Column(Float, nullable=False)
    nsd = Column(Float, nullable=False)

    run = relationship("Run", back_populates="metrics")


class CaseEfficiency(Base):
    __tablename__ = "case_efficiency"
    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(36), ForeignKey("runs.id"), nullable=False, index=True)
    case_id = Column(String, nullable=False)
    runtime_s = Column(Float, nullable=True)
    max_mem_mb = Column(Float, nullable=True)
    auc_mb_s = Column(Float, nullable=True)
    time_flag = Column(Boolean, default=False)
    memory_flag = Column(Boolean, default=False)

    run = relationship("Run", back_populates="efficiency")
