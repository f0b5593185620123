"""
Type-2 conversational learning: frozen adapters, memory accumulated online turn by turn
"""
from collections import namedtuple
from dataclasses import dataclass, asdict
import json
import logging
from pathlib import Path

from config import MAX_ANSWER_TOKENS
from modules.adapters import MemoryAdapter
from modules.memory import restore_state
from utils.checkpoint import save_tensors, load_tensors
from utils.errors import ContractError, SnapshotMismatchError
from utils.hashing import digest_tokens
from utils.tensor import graph_size, no_grad

logger = logging.getLogger(__name__)

TurnResult = namedtuple('TurnResult', ['new_tokens', 'truncated', 'input_digest'])
Answer = namedtuple('Answer', ['text', 'tokens', 'input_digest', 'truncated'])


@dataclass
class TranscriptEntry:
    index: int
    speaker: str
    text: str
    memory_norm: float
    truncated: bool = False


class ConversationHandle:
    """One conversation: shared frozen weights, an exclusively owned memory state"""

    def __init__(self, backbone, adapter=None, state=None, transcript=None):
        adapter = adapter or MemoryAdapter.build("baseline", backbone.config)
        if not adapter.frozen:
            raise ContractError("conversation handles need a frozen adapter")
        self.backbone = backbone
        self.adapter = adapter
        self.state = state if state is not None else adapter.init_memory()
        self.transcript = list(transcript or [])
        self._adapter_digest = adapter.digest()

    @property
    def method(self):
        return self.adapter.method

    @property
    def turns_processed(self):
        return len(self.transcript)

    @property
    def tokenizer(self):
        return self.backbone.tokenizer

    def memory_digest(self):
        return self.state.digest() if self.state is not None else ""

    def memory_norm(self):
        return self.state.norm() if self.state is not None else 0.0

    def _fit(self, tokens):
        limit = self.backbone.config.max_context
        tokens = [int(t) for t in tokens]
        if len(tokens) > limit:
            logger.warning(f"turn of {len(tokens)} tokens truncated from the left to {limit}")
            return tokens[-limit:], True
        return tokens, False

    def _check_invariants(self):
        if graph_size():
            raise ContractError(f"{graph_size()} graph nodes allocated during a Type-2 turn")
        if self.adapter.digest() != self._adapter_digest:
            raise ContractError("adapter parameters changed during the conversation")

    def run_turn(self, tokens, max_new=0, speaker="", text=""):
        """Read P_{t-1}, optionally generate, then write P_t from this turn's hidden states"""
        tokens, truncated = self._fit(tokens)
        hooks = self.adapter.hooks(self.state)
        new_tokens = []
        with no_grad():
            hidden, _ = self.backbone.forward(tokens, hooks)
            if max_new > 0:
                result = self.backbone.generate(tokens, hooks, max_new)
                new_tokens = result.new_tokens
                truncated = truncated or result.truncated
            self.state = self.adapter.write(self.state, hidden.final, hidden.layer_inputs)
        self.transcript.append(TranscriptEntry(len(self.transcript), speaker, text, self.memory_norm(), truncated))
        self._check_invariants()
        return TurnResult(new_tokens, truncated, digest_tokens(tokens))

    def say(self, speaker, text, max_new=0):
        """Process one dataset turn in the fixed turn template"""
        return self.run_turn(self.tokenizer.encode_turn(speaker, text), max_new, speaker, text)

    def answer(self, question, max_new=MAX_ANSWER_TOKENS):
        """Answer a question from the current memory without writing to it"""
        tokens = question if isinstance(question, list) else self.tokenizer.encode_question(question)
        tokens, truncated = self._fit(tokens)
        with no_grad():
            result = self.backbone.generate(tokens, self.adapter.hooks(self.state), max_new)
        self._check_invariants()
        return Answer(self.tokenizer.decode(result.new_tokens), result.new_tokens, digest_tokens(tokens),
                      truncated or result.truncated)

    def reset(self):
        """Explicit experiment-control reset; session boundaries never call this"""
        self.state = self.adapter.init_memory()
        self.transcript = []

    def ablate(self):
        return ablate_memory(self)

    def export_transcript(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for entry in self.transcript:
                f.write(json.dumps(asdict(entry), sort_keys=True) + "\n")
        logger.info(f"Transcript of {len(self.transcript)} turns written to {path}")


def ablate_memory(handle):
    """Clone of the handle with zero memory and an empty transcript; the original is untouched"""
    return ConversationHandle(handle.backbone, handle.adapter, handle.adapter.init_memory())


def snapshot(handle, path):
    state = handle.state
    meta = {
        'method': handle.method.value,
        'capacity': handle.adapter.dims.capacity,
        'turn': state.turn if state is not None else handle.turns_processed,
        'last_written': list(getattr(state, 'last_written', ())),
        'adapter_digest': handle._adapter_digest,
        'transcript': [asdict(e) for e in handle.transcript],
    }
    save_tensors(path, state.arrays() if state is not None else {}, 'memory', meta)


def restore(handle, path):
    """New handle over the same weights with the snapshot's memory and transcript"""
    try:
        arrays, meta = load_tensors(path, kind='memory')
        if meta.get('method') != handle.method.value:
            raise SnapshotMismatchError(
                f"snapshot {path} holds {meta.get('method')!r} memory, handle runs {handle.method.value!r}"
            )
        if meta.get('adapter_digest') != handle._adapter_digest:
            raise SnapshotMismatchError(f"snapshot {path} was taken with different adapter parameters")
        transcript = [TranscriptEntry(**e) for e in meta.get('transcript', [])]
        state = None
        if not handle.adapter.is_baseline:
            state = restore_state(handle.method, arrays, meta['turn'], meta.get('last_written', ()))
        logger.info(f"Restored {handle.method.label} memory at turn {meta['turn']} from {path}")
        return ConversationHandle(handle.backbone, handle.adapter, state, transcript)
    except Exception as e:
        logger.error(f"Error restoring snapshot {path}: {e}")
        raise
