"""
SQLAlchemy models for the run registry
"""
from sqlalchemy import Column, Integer, String, Float, DateTime, Text, ForeignKey, UniqueConstraint
from sqlalchemy.orm import relationship
from datetime import datetime

from database.db import Base


class RunRecord(Base):
    """One evaluated (method, capacity, seed) run"""
    __tablename__ = "runs"
    __table_args__ = (UniqueConstraint("name", name="uq_run_name"),)

    id = Column(Integer, primary_key=True)
    name = Column(String(100), nullable=False)
    method = Column(String(20), nullable=False)
    capacity = Column(String(10), nullable=False)
    seed = Column(Integer, nullable=False, default=0)
    corpus_hash = Column(String(64), nullable=False)
    adapter_hash = Column(String(64))
    backbone_hash = Column(String(64))
    retained_pct = Column(Float, nullable=False)
    delta_k = Column(Float, nullable=False)
    question_count = Column(Integer, nullable=False, default=0)
    run_dir = Column(Text)
    created_at = Column(DateTime, default=datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)

    # Relationships
    questions = relationship("QuestionRecord", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<RunRecord {self.name}>"


class QuestionRecord(Base):
    """Per-question scores of a run"""
    __tablename__ = "question_results"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    qid = Column(String(50), nullable=False)
    dialogue_id = Column(String(50), nullable=False)
    session = Column(Integer, nullable=False)
    lag = Column(Integer, nullable=False)
    f1_mem = Column(Float, nullable=False)
    f1_ablated = Column(Float, nullable=False)
    f1_baseline = Column(Float, nullable=False)
    retained = Column(Float, nullable=False)

    # Relationships
    run = relationship("RunRecord", back_populates="questions")

    def __repr__(self):
        return f"<QuestionRecord {self.qid} lag={self.lag}>"
