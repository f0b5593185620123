"""
Run registry module
"""
import logging

from database.db import DatabaseManager
from database.models import RunRecord, QuestionRecord

logger = logging.getLogger(__name__)


class RunRegistryManager:
    """Record evaluated runs and their per-question scores"""

    def __init__(self):
        self.session = DatabaseManager.get_session()

    def register_run(self, name, method, capacity, seed, corpus_hash, summary, questions,
                     adapter_hash=None, backbone_hash=None, run_dir=None):
        """Create or replace the run called name"""
        try:
            existing = self.get_run_by_name(name)
            if existing:
                self.session.delete(existing)
                self.session.flush()
            run = RunRecord(
                name=name, method=method, capacity=capacity, seed=seed, corpus_hash=corpus_hash,
                adapter_hash=adapter_hash, backbone_hash=backbone_hash,
                retained_pct=summary['retained_pct'], delta_k=summary['delta_k'],
                question_count=len(questions), run_dir=str(run_dir) if run_dir else None,
            )
            run.questions = [
                QuestionRecord(
                    qid=q.qid, dialogue_id=q.dialogue_id, session=q.session, lag=q.lag,
                    f1_mem=q.f1_mem, f1_ablated=q.f1_ablated, f1_baseline=q.f1_baseline, retained=q.retained,
                )
                for q in questions
            ]
            self.session.add(run)
            self.session.commit()
            logger.info(f"Run registered: {name} ({len(questions)} questions)")
            return run
        except Exception as e:
            self.session.rollback()
            logger.error(f"Error registering run {name}: {e}")
            raise

    def get_all_runs(self):
        try:
            return self.session.query(RunRecord).order_by(RunRecord.method, RunRecord.capacity, RunRecord.seed).all()
        except Exception as e:
            logger.error(f"Error getting runs: {e}")
            return []

    def get_run_by_name(self, name):
        try:
            return self.session.query(RunRecord).filter(RunRecord.name == name).first()
        except Exception as e:
            logger.error(f"Error getting run: {e}")
            return None

    def get_runs_by_names(self, names):
        try:
            return self.session.query(RunRecord).filter(RunRecord.name.in_(list(names))).all()
        except Exception as e:
            logger.error(f"Error getting runs: {e}")
            return []

    def question_rows(self, run_id):
        try:
            return self.session.query(QuestionRecord).filter(QuestionRecord.run_id == run_id).all()
        except Exception as e:
            logger.error(f"Error getting question rows: {e}")
            return []

    def delete_run(self, name):
        try:
            run = self.get_run_by_name(name)
            if not run:
                raise ValueError(f"Run {name} not found")
            self.session.delete(run)
            self.session.commit()
            logger.info(f"Run deleted: {name}")
        except Exception as e:
            self.session.rollback()
            logger.error(f"Error deleting run: {e}")
            raise

    def close_session(self):
        """Close database session"""
        if self.session:
            self.session.close()
