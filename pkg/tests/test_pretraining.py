"""
Tests for backbone pretraining
"""
import math
import unittest

from helpers import TOKENIZER, tiny_config

from modules.backbone import BackboneWeights
from modules.benchgen import pretraining_corpus
from modules.pretraining import PretrainConfig, pretrain, held_out_loss
from utils.errors import ConfigError
from utils.tensor import graph_size, reset_graph


class PretrainTest(unittest.TestCase):

    def setUp(self):
        reset_graph()
        self.sequences = pretraining_corpus(TOKENIZER, n_sequences=12, seed=0, n_entities=4, n_attributes=2)

    def test_corpus_is_deterministic_and_ends_with_answers(self):
        again = pretraining_corpus(TOKENIZER, n_sequences=12, seed=0, n_entities=4, n_attributes=2)
        self.assertEqual(self.sequences, again)
        for seq in self.sequences:
            self.assertEqual(seq[-1], TOKENIZER.eoa_id)
            self.assertIn(TOKENIZER.question_id, seq)

    def test_few_steps_produce_a_frozen_backbone(self):
        cfg = PretrainConfig(steps=3, learning_rate=1e-2, warmup_steps=0, batch_size=2, held_out=2)
        backbone, losses = pretrain(tiny_config(), self.sequences, cfg, TOKENIZER)
        self.assertEqual(len(losses), 3)
        self.assertTrue(all(math.isfinite(v) for v in losses))
        self.assertTrue(backbone.weights.frozen)
        self.assertEqual(graph_size(), 0)
        self.assertTrue(math.isfinite(held_out_loss(backbone, self.sequences[:2])))

    def test_same_seed_same_weights(self):
        cfg = PretrainConfig(steps=2, learning_rate=1e-2, warmup_steps=0, batch_size=2, held_out=2, seed=4)
        first, _ = pretrain(tiny_config(), self.sequences, cfg, TOKENIZER)
        second, _ = pretrain(tiny_config(), self.sequences, cfg, TOKENIZER)
        self.assertEqual(first.digest(), second.digest())

    def test_needs_training_sequences(self):
        with self.assertRaises(ConfigError):
            pretrain(tiny_config(), self.sequences[:2], PretrainConfig(steps=1, held_out=2), TOKENIZER)
        with self.assertRaises(ConfigError):
            PretrainConfig(steps=-1)
        with self.assertRaises(ConfigError):
            PretrainConfig(steps=5, batch_size=0)

    def test_zero_steps_keep_the_initialised_backbone(self):
        cfg = PretrainConfig(steps=0, held_out=2)
        backbone, losses = pretrain(tiny_config(), self.sequences, cfg, TOKENIZER)
        self.assertEqual(losses, [])
        self.assertTrue(backbone.weights.frozen)
        fresh = BackboneWeights.initialize(tiny_config(), cfg.seed)
        self.assertEqual(backbone.weights.digest(), fresh.digest())
        uniform = math.log(TOKENIZER.size)
        self.assertAlmostEqual(held_out_loss(backbone, self.sequences[:2]), uniform, delta=0.05 * uniform)


class PretrainConvergenceTest(unittest.TestCase):

    def test_short_run_beats_uniform_by_a_margin(self):
        reset_graph()
        sequences = pretraining_corpus(TOKENIZER, n_sequences=80, seed=1, n_entities=4, n_attributes=2)
        cfg = PretrainConfig(steps=150, learning_rate=1e-2, warmup_steps=0, batch_size=4, held_out=8, seed=1)
        backbone, losses = pretrain(tiny_config(), sequences, cfg, TOKENIZER)
        self.assertEqual(len(losses), 150)
        held = held_out_loss(backbone, sequences[:8])
        self.assertLess(held, 0.8 * math.log(TOKENIZER.size))


if __name__ == "__main__":
    unittest.main()
