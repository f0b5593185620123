"""
Tests for Type-2 conversation handles, ablation and snapshots
"""
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from helpers import tiny_backbone

from modules.adapters import MemoryAdapter
from modules.runtime import ConversationHandle, ablate_memory, snapshot, restore
from utils.errors import ContractError, SnapshotMismatchError
from utils.tensor import graph_size, reset_graph

TURNS = [
    ("anna", "mia job is pilot"),
    ("ben", "how was your weekend"),
    ("anna", "oliver city is tokyo"),
]


def frozen_adapter(backbone, method, seed=0):
    return MemoryAdapter.build(method, backbone.config, seed=seed).freeze()


class ConversationTest(unittest.TestCase):

    def setUp(self):
        reset_graph()
        self.backbone = tiny_backbone()

    def converse(self, handle):
        for speaker, text in TURNS:
            handle.say(speaker, text)
        return handle

    def test_same_turns_same_memory(self):
        adapter = frozen_adapter(self.backbone, "m3")
        first = self.converse(ConversationHandle(self.backbone, adapter))
        second = self.converse(ConversationHandle(self.backbone, adapter))
        self.assertEqual(first.memory_digest(), second.memory_digest())
        self.assertEqual(first.answer("what is mia job ?"), second.answer("what is mia job ?"))
        self.assertEqual(first.state.turn, len(TURNS))
        self.assertEqual(graph_size(), 0)

    def test_answers_do_not_write(self):
        handle = self.converse(ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m1")))
        digest = handle.memory_digest()
        answer = handle.answer("what is mia job ?", max_new=3)
        self.assertLessEqual(len(answer.tokens), 3)
        self.assertEqual(handle.memory_digest(), digest)
        self.assertEqual(handle.turns_processed, len(TURNS))

    def test_every_turn_changes_memory(self):
        handle = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m4"))
        digests = [handle.memory_digest()]
        for speaker, text in TURNS:
            handle.say(speaker, text)
            digests.append(handle.memory_digest())
        self.assertEqual(len(set(digests)), len(digests))
        norms = [entry.memory_norm for entry in handle.transcript]
        self.assertTrue(all(n > 0 for n in norms))

    def test_ablation_leaves_the_original_untouched(self):
        handle = self.converse(ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m2")))
        digest = handle.memory_digest()
        ablated = ablate_memory(handle)
        self.assertEqual(ablated.memory_norm(), 0.0)
        self.assertEqual(ablated.turns_processed, 0)
        self.assertEqual(handle.memory_digest(), digest)
        fresh = ConversationHandle(self.backbone, handle.adapter)
        self.assertEqual(ablated.answer("what is mia job ?"), fresh.answer("what is mia job ?"))

    def test_reset_clears_memory_and_transcript(self):
        handle = self.converse(ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m6")))
        handle.reset()
        self.assertEqual(handle.memory_norm(), 0.0)
        self.assertEqual(handle.transcript, [])

    def test_handles_need_frozen_adapters(self):
        adapter = MemoryAdapter.build("m1", self.backbone.config)
        with self.assertRaises(ContractError):
            ConversationHandle(self.backbone, adapter)

    def test_long_turns_are_truncated_from_the_left(self):
        handle = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m1"))
        limit = self.backbone.config.max_context
        result = handle.run_turn(list(range(4, 4 + limit + 5)))
        self.assertTrue(result.truncated)
        self.assertTrue(handle.transcript[-1].truncated)
        self.assertEqual(handle.state.turn, 1)

    def test_baseline_handle_keeps_no_state(self):
        handle = self.converse(ConversationHandle(self.backbone))
        self.assertIsNone(handle.state)
        self.assertEqual(handle.memory_digest(), "")
        self.assertEqual(handle.turns_processed, len(TURNS))

    def test_transcript_export(self):
        handle = self.converse(ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m5")))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "transcript.jsonl"
            handle.export_transcript(path)
            rows = [json.loads(line) for line in path.read_text().splitlines()]
        self.assertEqual([r['text'] for r in rows], [t for _, t in TURNS])
        self.assertEqual([r['index'] for r in rows], [0, 1, 2])


class SnapshotTest(unittest.TestCase):

    def setUp(self):
        reset_graph()
        self.backbone = tiny_backbone()
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "memory.ckpt"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_continues_identically(self):
        for method in ("m1", "m3", "m4", "m6"):
            with self.subTest(method=method):
                adapter = frozen_adapter(self.backbone, method)
                handle = ConversationHandle(self.backbone, adapter)
                for speaker, text in TURNS[:2]:
                    handle.say(speaker, text)
                snapshot(handle, self.path)
                restored = restore(handle, self.path)
                self.assertEqual(restored.memory_digest(), handle.memory_digest())
                self.assertEqual(restored.turns_processed, 2)
                self.assertEqual(restored.state.turn, handle.state.turn)
                handle.say(*TURNS[2])
                restored.say(*TURNS[2])
                self.assertEqual(restored.memory_digest(), handle.memory_digest())
                if method == "m6":
                    self.assertEqual(restored.state.last_written, handle.state.last_written)

    def test_method_mismatch(self):
        hebbian = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m4"))
        hebbian.say(*TURNS[0])
        snapshot(hebbian, self.path)
        slots = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m6"))
        with self.assertRaises(SnapshotMismatchError):
            restore(slots, self.path)

    def test_adapter_mismatch(self):
        handle = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m1", seed=0))
        handle.say(*TURNS[0])
        snapshot(handle, self.path)
        other = ConversationHandle(self.backbone, frozen_adapter(self.backbone, "m1", seed=1))
        with self.assertRaises(SnapshotMismatchError):
            restore(other, self.path)

    def test_baseline_snapshot(self):
        handle = ConversationHandle(self.backbone)
        handle.say(*TURNS[0])
        snapshot(handle, self.path)
        restored = restore(handle, self.path)
        self.assertIsNone(restored.state)
        self.assertEqual(restored.turns_processed, 1)
        self.assertTrue(np.isclose(restored.memory_norm(), 0.0))


if __name__ == "__main__":
    unittest.main()
