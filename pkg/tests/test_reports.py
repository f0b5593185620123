"""
Tests for the run registry and report generation
"""
import csv
from io import StringIO
import json
import tempfile
import unittest
from pathlib import Path

import helpers  # noqa: F401

from config import SUMMARY_FILE, RESULTS_FILE, BUCKET_CSV_FILE, KNOWLEDGE_CSV_FILE, registry_url
from database.db import DatabaseManager
from modules.evaluation import (
    QuestionResult, KnowledgeResult, ProtocolResult, bucket_and_smooth, knowledge_curve, summarize
)
from modules.registry import RunRegistryManager
from modules.reports import ReportGenerator
from utils.errors import ValidationError


def protocol_result(retained=(0.6, 0.4), k_mem=0.9):
    questions = [
        QuestionResult(qid=f"q{i}", dialogue_id="d0", lag=lag, f1_mem=r, f1_ablated=0.0, f1_baseline=0.0,
                       retained=r, session=i)
        for i, (lag, r) in enumerate(zip([5, 40], retained))
    ]
    knowledge = [KnowledgeResult("q0", "d0", 0, k_mem, 0.4), KnowledgeResult("q0", "d0", 1, k_mem, 0.2)]
    curve = bucket_and_smooth(questions)
    curve.k_series, curve.k_carried, curve.delta_k = knowledge_curve(knowledge, 2)
    return ProtocolResult(curve, questions, knowledge, summarize(curve, questions, knowledge))


class ReportTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.runs_dir = Path(self.tmp.name)
        DatabaseManager.initialize(registry_url(self.runs_dir))
        self.registry = RunRegistryManager()

    def tearDown(self):
        self.registry.close_session()
        DatabaseManager.close()
        self.tmp.cleanup()

    def register(self, name, method, capacity, corpus_hash="c" * 64, **kwargs):
        outcome = protocol_result(**kwargs)
        return self.registry.register_run(name, method, capacity, 0, corpus_hash, outcome.summary,
                                          outcome.questions)


class RegistryTest(ReportTestCase):

    def test_register_and_query(self):
        self.register("m1_1x_0", "m1", "1x")
        run = self.registry.get_run_by_name("m1_1x_0")
        self.assertEqual(run.method, "m1")
        self.assertAlmostEqual(run.retained_pct, 40.0)
        self.assertEqual(run.question_count, 2)
        self.assertEqual(len(self.registry.question_rows(run.id)), 2)
        self.assertIsNone(self.registry.get_run_by_name("missing"))

    def test_reregistering_replaces_the_run(self):
        self.register("m1_1x_0", "m1", "1x")
        self.register("m1_1x_0", "m1", "1x", retained=(0.9, 0.1))
        runs = self.registry.get_all_runs()
        self.assertEqual(len(runs), 1)
        self.assertAlmostEqual(runs[0].retained_pct, 10.0)
        self.assertEqual(len(self.registry.question_rows(runs[0].id)), 2)

    def test_delete_cascades_to_questions(self):
        run = self.register("m4_1x_0", "m4", "1x")
        run_id = run.id
        self.registry.delete_run("m4_1x_0")
        self.assertEqual(self.registry.question_rows(run_id), [])
        with self.assertRaises(ValueError):
            self.registry.delete_run("m4_1x_0")


class ReportGeneratorTest(ReportTestCase):

    def setUp(self):
        super().setUp()
        self.reports = ReportGenerator(self.registry)

    def test_merged_table(self):
        self.register("baseline_1x_0", "baseline", "1x", retained=(0.0, 0.0), k_mem=0.3)
        self.register("m1_1x_0", "m1", "1x", retained=(0.5, 0.2))
        self.register("m1_10x_0", "m1", "10x", retained=(0.7, 0.5))
        rows = self.reports.merged_table()
        self.assertEqual([r['method'] for r in rows], ["M.0", "M.1"])
        m1 = rows[1]
        self.assertAlmostEqual(m1['retained_1x'], 20.0)
        self.assertAlmostEqual(m1['retained_10x'], 50.0)
        self.assertAlmostEqual(m1['retained_change'], 30.0)
        self.assertIsNone(rows[0]['retained_10x'])
        self.assertIsNone(rows[0]['retained_change'])

        parsed = list(csv.reader(StringIO(self.reports.export_to_csv(rows))))
        self.assertEqual(parsed[0], ['method', 'retained_1x', 'delta_k_1x', 'retained_10x', 'delta_k_10x',
                                     'retained_change'])
        self.assertEqual(parsed[1][3], "")
        self.assertIn("M.1", self.reports.format_table(rows))

    def test_selected_runs_only(self):
        self.register("m1_1x_0", "m1", "1x")
        self.register("m2_1x_0", "m2", "1x")
        rows = self.reports.merged_table(["m2_1x_0"])
        self.assertEqual([r['method'] for r in rows], ["M.2"])

    def test_refuses_mixed_corpora(self):
        self.register("m1_1x_0", "m1", "1x", corpus_hash="a" * 64)
        self.register("m2_1x_0", "m2", "1x", corpus_hash="b" * 64)
        with self.assertRaises(ValidationError):
            self.reports.merged_table()

    def test_run_outputs(self):
        run_dir = self.runs_dir / "m1_1x_0"
        summary = self.reports.write_run_outputs(run_dir, protocol_result(), {'method': 'm1'})
        stored = json.loads((run_dir / SUMMARY_FILE).read_text())
        self.assertEqual(stored['method'], 'm1')
        self.assertAlmostEqual(stored['retained_pct'], summary['retained_pct'])
        self.assertEqual(len(stored['buckets']), 5)
        self.assertEqual(len((run_dir / RESULTS_FILE).read_text().splitlines()), 2)
        buckets = list(csv.reader(StringIO((run_dir / BUCKET_CSV_FILE).read_text())))
        self.assertEqual(buckets[0], ['bucket', 'raw', 'smoothed', 'count'])
        self.assertEqual(len(buckets), 6)
        knowledge = list(csv.reader(StringIO((run_dir / KNOWLEDGE_CSV_FILE).read_text())))
        self.assertEqual([row[0] for row in knowledge[1:]], ["0", "1"])


if __name__ == "__main__":
    unittest.main()
