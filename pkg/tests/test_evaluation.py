"""
Tests for the forgetting-curve and knowledge protocol
"""
import unittest

from helpers import TOKENIZER, tiny_backbone, tiny_corpus, micro_dialogue

from modules.adapters import MemoryAdapter
from modules.backbone import Backbone
from modules.evaluation import (
    QuestionResult, KnowledgeResult, bucket_and_smooth, knowledge_curve, run_protocol, ProtocolRunner
)
from modules.runtime import ConversationHandle, ablate_memory
from modules.tokenizer import WordTokenizer
from utils.errors import EmptyCurveError, EqualInputViolation
from utils.hashing import digest_tokens
from utils.tensor import reset_graph


class UnmarkedQuestions(WordTokenizer):
    """Leaves out the question marker"""

    def encode_question(self, question):
        return self.encode(question)


def result(lag, retained, qid="q"):
    return QuestionResult(qid=qid, dialogue_id="d0", lag=lag, f1_mem=retained, f1_ablated=0.0,
                          f1_baseline=0.0, retained=retained, session=0)


class CurveTest(unittest.TestCase):

    def test_empty_results(self):
        with self.assertRaises(EmptyCurveError):
            bucket_and_smooth([])

    def test_empty_buckets_are_skipped(self):
        results = [result(3, 0.2), result(10, 0.4), result(70, 0.9)]
        with self.assertLogs("modules.evaluation", level="WARNING"):
            curve = bucket_and_smooth(results)
        self.assertEqual(curve.counts, [2, 0, 1, 0, 0])
        self.assertAlmostEqual(curve.raw[0], 0.3)
        self.assertIsNone(curve.raw[1])
        self.assertIsNone(curve.smoothed[3])
        # bucket 2 rises above bucket 0, so both pool to the weighted mean
        self.assertAlmostEqual(curve.smoothed[0], 0.5)
        self.assertAlmostEqual(curve.smoothed[2], 0.5)
        self.assertAlmostEqual(curve.retained_min, 0.5)
        rows = list(curve.bucket_rows())
        self.assertEqual(rows[1], ("[32,64)", None, None, 0))

    def test_decreasing_curve_is_kept(self):
        results = [result(lag, r) for lag, r in [(0, 0.8), (40, 0.6), (100, 0.4), (200, 0.3), (400, 0.1)]]
        curve = bucket_and_smooth(results)
        self.assertEqual([round(v, 6) for v in curve.smoothed], [0.8, 0.6, 0.4, 0.3, 0.1])
        self.assertAlmostEqual(curve.retained_min, 0.1)

    def test_knowledge_carries_forward(self):
        results = [
            KnowledgeResult("a", "d0", 0, f1_mem=1.0, f1_baseline=0.5),
            KnowledgeResult("b", "d0", 0, f1_mem=0.0, f1_baseline=0.0),
            KnowledgeResult("a", "d0", 2, f1_mem=1.0, f1_baseline=0.0),
        ]
        series, carried, delta = knowledge_curve(results, 4)
        self.assertEqual(series, [25.0, 25.0, 100.0, 100.0])
        self.assertEqual(carried, [False, True, False, True])
        self.assertEqual(delta, 100.0)


class ProtocolTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.backbone = tiny_backbone()
        cls.corpus = tiny_corpus()

    def setUp(self):
        reset_graph()

    def test_baseline_retains_nothing(self):
        adapter = MemoryAdapter.build("baseline", self.backbone.config)
        outcome = run_protocol(self.backbone, adapter, self.corpus, max_answer_tokens=2)
        self.assertEqual(outcome.summary['retained_pct'], 0.0)
        self.assertEqual(outcome.summary['delta_k'], 0.0)
        self.assertEqual(len(outcome.questions), sum(len(d.qa) for d in self.corpus))
        for q in outcome.questions:
            self.assertEqual(q.f1_mem, q.f1_ablated)
            self.assertEqual(q.pred_mem, q.pred_baseline)

    def test_untrained_cross_attention_matches_the_baseline(self):
        adapter = MemoryAdapter.build("m2", self.backbone.config).freeze()
        outcome = run_protocol(self.backbone, adapter, self.corpus, max_answer_tokens=2)
        for q in outcome.questions:
            self.assertEqual(q.pred_mem, q.pred_baseline)
            self.assertEqual(q.pred_ablated, q.pred_baseline)
            self.assertEqual(q.retained, 0.0)
        self.assertEqual(outcome.curve.delta_k, 0.0)

    def test_every_condition_sees_the_same_question(self):
        adapter = MemoryAdapter.build("m6", self.backbone.config).freeze()
        questions, knowledge = ProtocolRunner(self.backbone, adapter, 2).run_dialogue(micro_dialogue())
        self.assertEqual(len(questions), 1)
        self.assertEqual(questions[0].lag, 2)
        self.assertEqual(questions[0].session, 1)
        self.assertEqual(len(questions[0].input_digest), 64)
        # the fact is current at the end of both sessions
        self.assertEqual([k.session for k in knowledge], [0, 1])
        self.assertTrue(0.0 <= questions[0].retained <= 1.0)

    def test_mismatched_encoding_is_refused(self):
        adapter = MemoryAdapter.build("m4", self.backbone.config).freeze()
        mem = ConversationHandle(self.backbone, adapter)
        skewed = Backbone(self.backbone.config, self.backbone.weights, UnmarkedQuestions(TOKENIZER.vocabulary))
        baseline = ConversationHandle(skewed)
        with self.assertRaises(EqualInputViolation):
            ProtocolRunner(self.backbone, adapter, 2)._three_way(
                mem, ablate_memory(mem), baseline, "what is mia job ?", {})

    def test_zero_state_answers_are_cached_by_question(self):
        adapter = MemoryAdapter.build("m4", self.backbone.config).freeze()
        mem = ConversationHandle(self.backbone, adapter)
        runner = ProtocolRunner(self.backbone, adapter, 2)
        cache = {}
        answers, digest = runner._three_way(mem, ablate_memory(mem), ConversationHandle(self.backbone),
                                            "what is mia job ?", cache)
        self.assertEqual(set(cache), {('ablated', "what is mia job ?"), ('baseline', "what is mia job ?")})
        self.assertEqual({a.input_digest for a in answers}, {digest})
        self.assertEqual(digest, digest_tokens(TOKENIZER.encode_question("what is mia job ?")))

    def test_no_dialogues(self):
        with self.assertRaises(EmptyCurveError):
            run_protocol(self.backbone, MemoryAdapter.build("baseline", self.backbone.config), [])


if __name__ == "__main__":
    unittest.main()
