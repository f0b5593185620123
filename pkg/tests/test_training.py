"""
Tests for Type-1 training: optimizer, windowing, trainer contracts
"""
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from helpers import TOKENIZER, tiny_backbone, tiny_config, tiny_corpus, micro_dialogue

from modules.adapters import MemoryAdapter
from modules.backbone import Backbone, BackboneWeights
from modules.memory import restore_state
from modules.training import (
    TrainConfig, OptimizerState, Type1Trainer, learning_rate_at, clip_grad_norm, global_grad_norm, adamw_step,
    dialogue_windows, split_dialogues, validate, type1_train, run_window, example_loss
)
from utils.errors import ConfigError, ContractError, TrainingDivergedError
from utils.tensor import Tensor, backward, no_grad, reset_graph


class AdamWTest(unittest.TestCase):

    def oracle(self, p, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            p -= lr * wd * p
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            p -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        return p

    def test_scalar_updates_match_the_closed_form(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01, warmup_steps=0, grad_clip=100.0)
        param = Tensor(np.array([[1.0]]), requires_grad=True, dtype=np.float64)
        params = {'p': param}
        opt = OptimizerState.create(params, cfg.weight_decay)
        history = [0.5, -0.2, 0.3]
        for g in history:
            adamw_step(params, {'p': np.array([[g]])}, opt, cfg)
        self.assertAlmostEqual(float(param.data[0, 0]), self.oracle(1.0, history, 0.1, 0.01), places=10)
        self.assertEqual(opt.step, 3)

    def test_first_step_moves_by_the_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0, warmup_steps=0)
        param = Tensor(np.array([[1.0]]), requires_grad=True, dtype=np.float64)
        opt = OptimizerState.create({'p': param}, 0.0)
        adamw_step({'p': param}, {'p': np.array([[0.5]])}, opt, cfg)
        self.assertAlmostEqual(float(param.data[0, 0]), 0.9, places=6)

    def test_zero_learning_rate_changes_nothing(self):
        cfg = TrainConfig(learning_rate=0.0, weight_decay=0.01, warmup_steps=0)
        data = np.arange(6, dtype=np.float32).reshape(2, 3)
        param = Tensor(data.copy(), requires_grad=True)
        opt = OptimizerState.create({'p': param}, cfg.weight_decay)
        adamw_step({'p': param}, {'p': np.ones((2, 3), np.float32)}, opt, cfg)
        np.testing.assert_array_equal(param.data, data)

    def test_parameters_without_gradient_are_skipped(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5, warmup_steps=0)
        a = Tensor(np.ones((1, 2)), requires_grad=True, dtype=np.float64)
        b = Tensor(np.ones((1, 2)), requires_grad=True, dtype=np.float64)
        opt = OptimizerState.create({'a': a, 'b': b}, cfg.weight_decay)
        adamw_step({'a': a, 'b': b}, {'a': np.ones((1, 2)), 'b': None}, opt, cfg)
        np.testing.assert_array_equal(b.data, np.ones((1, 2)))
        self.assertTrue((a.data < 1.0).all())

    def test_clipping_rescales_to_the_bound(self):
        grads = {'a': np.array([[6.0, 8.0]]), 'b': None}
        norm = clip_grad_norm(grads, 1.0)
        self.assertAlmostEqual(norm, 10.0)
        self.assertAlmostEqual(global_grad_norm(grads), 1.0, places=5)
        small = {'a': np.array([[0.3, 0.4]])}
        clip_grad_norm(small, 1.0)
        np.testing.assert_array_equal(small['a'], [[0.3, 0.4]])

    def test_linear_warmup(self):
        cfg = TrainConfig(learning_rate=1.0, warmup_steps=10)
        self.assertAlmostEqual(learning_rate_at(1, cfg), 0.1)
        self.assertAlmostEqual(learning_rate_at(5, cfg), 0.5)
        self.assertEqual(learning_rate_at(10, cfg), 1.0)
        self.assertEqual(learning_rate_at(1, TrainConfig(learning_rate=1.0, warmup_steps=0)), 1.0)

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=0)
        with self.assertRaises(ConfigError):
            TrainConfig(grad_clip=0.0)
        with self.assertRaises(ConfigError):
            TrainConfig(validation_fraction=1.0)
        self.assertEqual(TrainConfig(batch_size=4, grad_accumulation=4).effective_batch, 16)


class WindowTest(unittest.TestCase):

    def test_turns_and_questions_in_conversation_order(self):
        dialogue = micro_dialogue()
        windows = dialogue_windows(dialogue, TOKENIZER, window_turns=2)
        self.assertEqual([len(w) for w in windows], [3, 4])
        self.assertEqual([e.write for e in windows[0]], [True, True, False])
        self.assertEqual([e.write for e in windows[1]], [True, False, True, False])
        without = dialogue_windows(dialogue, TOKENIZER, window_turns=2, session_probes=False)
        self.assertEqual([len(w) for w in without], [2, 3])

    def test_question_example_scores_answer_and_end_marker(self):
        dialogue = micro_dialogue()
        example = dialogue_windows(dialogue, TOKENIZER, 4, session_probes=False)[0][3]
        answer = TOKENIZER.encode_answer("pilot")
        question = TOKENIZER.encode_question("what is mia job ?")
        self.assertEqual(example.targets, answer)
        self.assertEqual(example.tokens, question + answer)
        self.assertEqual(example.positions[0], len(question) - 1)
        self.assertEqual(example.targets[-1], TOKENIZER.eoa_id)

    def test_split_is_by_dialogue_and_deterministic(self):
        dialogues = list(range(10))
        train, val = split_dialogues(dialogues, 0.1, seed=5)
        self.assertEqual((len(train), len(val)), (9, 1))
        self.assertEqual(split_dialogues(dialogues, 0.1, seed=5), (train, val))
        self.assertEqual(sorted(train + val), dialogues)
        with self.assertRaises(ConfigError):
            split_dialogues([0], 0.1, seed=0)


class TrainerTest(unittest.TestCase):

    def setUp(self):
        reset_graph()
        self.backbone = tiny_backbone()
        self.corpus = tiny_corpus()
        self.cfg = TrainConfig(learning_rate=1e-3, warmup_steps=0, epochs=1, batch_size=1, grad_accumulation=1,
                               window_turns=6, max_steps=2)

    def tearDown(self):
        reset_graph()

    def test_fit_trains_only_read_parameters(self):
        adapter = MemoryAdapter.build("m1", self.backbone.config)
        before_read = adapter.read_digest()
        before_write = {k: t.data.copy() for k, t in adapter.write_params.items()}
        backbone_digest = self.backbone.digest()
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / "train_log.jsonl"
            trained, history = type1_train(self.backbone, adapter, self.corpus[:1], self.cfg,
                                           val_dialogues=self.corpus[1:], log_path=log_path)
            records = [json.loads(line) for line in log_path.read_text().splitlines()]
        self.assertEqual(len(history.steps), 2)
        self.assertEqual([r['step'] for r in records], [1, 2])
        self.assertTrue(trained.frozen)
        self.assertNotEqual(trained.read_digest(), before_read)
        self.assertEqual(self.backbone.digest(), backbone_digest)
        for k, t in trained.write_params.items():
            np.testing.assert_array_equal(t.data, before_write[k])
        self.assertEqual(history.best_epoch, 0)
        self.assertEqual(len(history.val_losses), 1)

    def test_lockstep_batches_accumulate_before_stepping(self):
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=0, epochs=1, batch_size=2, grad_accumulation=1,
                          window_turns=6)
        trainer = Type1Trainer(self.backbone, MemoryAdapter.build("m6", self.backbone.config), cfg)
        trainer.train_epoch(self.corpus, 0)
        # two dialogues of three windows each, two windows per step
        self.assertEqual(len(trainer.history.steps), 3)
        self.assertTrue(all(p.grad is None for p in trainer.params.values()))

    def test_backbone_must_be_frozen(self):
        backbone = tiny_backbone()
        backbone.weights.unfreeze()
        with self.assertRaises(ContractError):
            Type1Trainer(backbone, MemoryAdapter.build("m1", backbone.config), self.cfg)

    def test_baseline_cannot_be_trained(self):
        with self.assertRaises(ConfigError):
            Type1Trainer(self.backbone, MemoryAdapter.build("baseline", self.backbone.config), self.cfg)

    def test_empty_validation_set(self):
        with self.assertRaises(ConfigError):
            validate(self.backbone, MemoryAdapter.build("m1", self.backbone.config), [])

    def test_same_seed_replays_the_same_run(self):
        runs = []
        for _ in range(2):
            adapter = MemoryAdapter.build("m5", self.backbone.config, seed=3)
            trained, history = type1_train(self.backbone, adapter, self.corpus[:1], self.cfg,
                                           val_dialogues=self.corpus[1:])
            runs.append((trained.digest(), history.steps, history.val_losses))
        self.assertEqual(runs[0], runs[1])

    def test_no_gradient_crosses_a_window_boundary(self):
        adapter = MemoryAdapter.build("m4", self.backbone.config)
        first, second = dialogue_windows(micro_dialogue(), TOKENIZER, window_turns=2)[:2]
        _, carried = run_window(self.backbone, adapter, adapter.init_memory(), first)
        reset_graph()
        self.assertFalse(carried.matrix.requires_grad)

        loss, _ = run_window(self.backbone, adapter, carried, second)
        backward(loss)
        through_carried = {k: None if p.grad is None else p.grad.copy() for k, p in adapter.read_params.items()}
        adapter.zero_grad()

        rebuilt = restore_state("m4", carried.arrays(), carried.turn)
        loss, _ = run_window(self.backbone, adapter, rebuilt, second)
        backward(loss)
        for name, p in adapter.read_params.items():
            if through_carried[name] is None:
                self.assertIsNone(p.grad, name)
            else:
                np.testing.assert_allclose(p.grad, through_carried[name], rtol=1e-6, atol=1e-9, err_msg=name)
        adapter.zero_grad()

    def test_nan_loss_is_reported(self):
        adapter = MemoryAdapter.build("m4", self.backbone.config)
        adapter.read_params['w_qh'].data[...] = np.nan
        trainer = Type1Trainer(self.backbone, adapter, self.cfg)
        with self.assertRaises(TrainingDivergedError) as ctx:
            trainer.train_epoch(self.corpus[:1], 0)
        self.assertIn("M.4", str(ctx.exception))


def expressive_backbone():
    """Tiny backbone whose tied output head can reach confident predictions"""
    weights = BackboneWeights.initialize(tiny_config(), seed=0)
    weights.tensors['wte'].data *= 50.0
    return Backbone(tiny_config(), weights.freeze(), TOKENIZER)


def question_loss(backbone, adapter, dialogue, window_turns):
    """Mean loss of the question examples after replaying the dialogue into memory"""
    losses = []
    with no_grad():
        state = adapter.init_memory()
        for window in dialogue_windows(dialogue, TOKENIZER, window_turns):
            for example in window:
                loss, hidden = example_loss(backbone, adapter, state, example)
                if example.write:
                    state = adapter.write(state, hidden.final, hidden.layer_inputs)
                else:
                    losses.append(loss.item())
    return float(np.mean(losses))


class OverfitTest(unittest.TestCase):

    def tearDown(self):
        reset_graph()

    def test_cross_attention_memorises_one_dialogue(self):
        backbone = expressive_backbone()
        dialogue = micro_dialogue()
        cfg = TrainConfig(learning_rate=2e-2, warmup_steps=0, epochs=200, patience=200, batch_size=1,
                          grad_accumulation=1, window_turns=4, weight_decay=0.0)
        adapter = MemoryAdapter.build("m2", backbone.config).freeze()
        before = question_loss(backbone, adapter, dialogue, cfg.window_turns)
        trained, history = type1_train(backbone, adapter.unfreeze(), [dialogue], cfg, val_dialogues=[dialogue])
        after = question_loss(backbone, trained, dialogue, cfg.window_turns)
        self.assertLessEqual(after, 0.5 * before, f"question loss {before:.3f} -> {after:.3f}")
        self.assertLess(history.best_val_loss, history.val_losses[0])


if __name__ == "__main__":
    unittest.main()
