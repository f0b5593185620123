"""
Shared fixtures for the test suite: package path, tiny backbone, tiny corpora
"""
from pathlib import Path
import sys

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "latent_memory"))

import numpy as np  # noqa: E402

from modules.backbone import Backbone, BackboneConfig, BackboneWeights  # noqa: E402
from modules.benchgen import BenchConfig, Dialogue, QAItem, Session, Turn, generate  # noqa: E402
from modules.tokenizer import WordTokenizer  # noqa: E402
from utils.tensor import Tensor  # noqa: E402

TOKENIZER = WordTokenizer.from_lexicon()


def tiny_config(layers=2, d_model=16, heads=2, context=64):
    return BackboneConfig(n_layers=layers, d_model=d_model, n_heads=heads,
                          vocab_size=TOKENIZER.size, max_context=context)


def tiny_backbone(seed=0, dtype=np.float32, **kwargs):
    config = tiny_config(**kwargs)
    weights = BackboneWeights.initialize(config, seed, dtype)
    return Backbone(config, weights.freeze(), TOKENIZER)


def tiny_bench_config(**overrides):
    values = dict(n_dialogues=2, n_sessions=3, turns_per_session=6, n_entities=2, n_attributes=2,
                  lag_profile=[2, 0, 0, 0, 0], seed=0)
    values.update(overrides)
    return BenchConfig(**values)


def tiny_corpus(**overrides):
    return generate(tiny_bench_config(**overrides))


def micro_dialogue():
    """Two sessions, one fact, one question asked two turns later"""
    sessions = [
        Session(0, [Turn("anna", "mia job is pilot"), Turn("ben", "how was your weekend")]),
        Session(1, [Turn("anna", "we should meet for coffee soon"), Turn("ben", "that sounds nice to me")]),
    ]
    qa = [QAItem("what is mia job ?", "pilot", [0], 2, 3, qid="micro_q0")]
    return Dialogue("micro", sessions, qa)


def random_tensor(rng, shape, requires_grad=True, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)
