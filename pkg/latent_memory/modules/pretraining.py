"""
In-repo pretraining of the backbone on in-context fact / question sequences
"""
from dataclasses import dataclass, asdict
import logging
import math

import numpy as np
from tqdm import tqdm

from config import (
    PRETRAIN_STEPS, PRETRAIN_LR, PRETRAIN_WARMUP, PRETRAIN_HELD_OUT, PRETRAIN_BATCH, GRAD_CLIP,
    ADAM_BETAS, ADAM_EPS
)
from modules.backbone import Backbone, BackboneWeights
from modules.training import OptimizerState, adamw_step
from utils.errors import ConfigError, TrainingDivergedError
from utils.tensor import add, scale, cross_entropy, backward, no_grad, reset_graph

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = PRETRAIN_STEPS
    learning_rate: float = PRETRAIN_LR
    warmup_steps: int = PRETRAIN_WARMUP
    batch_size: int = PRETRAIN_BATCH
    held_out: int = PRETRAIN_HELD_OUT
    weight_decay: float = 0.0
    grad_clip: float = GRAD_CLIP
    seed: int = 0
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("pretraining needs steps >= 0, batch_size >= 1 and learning_rate > 0")
        if self.held_out < 1:
            raise ConfigError("pretraining needs at least one held-out sequence")

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data


def sequence_loss(backbone, tokens):
    """Mean next-token cross-entropy of one sequence"""
    tokens = tokens[:backbone.config.max_context]
    _, logits = backbone.forward(tokens[:-1])
    return cross_entropy(logits, tokens[1:])


def held_out_loss(backbone, sequences):
    with no_grad():
        return float(np.mean([sequence_loss(backbone, s).item() for s in sequences]))


def pretrain(backbone_config, sequences, cfg=None, tokenizer=None):
    """
    Train a fresh backbone on token sequences; returns (frozen Backbone, per-step losses).
    With steps=0 the freshly initialised backbone comes back untouched.
    """
    cfg = cfg or PretrainConfig()
    sequences = [s for s in sequences if len(s) >= 2]
    if len(sequences) <= cfg.held_out:
        raise ConfigError(f"{len(sequences)} sequences leave nothing to train on after {cfg.held_out} held out")
    held, train = sequences[:cfg.held_out], sequences[cfg.held_out:]

    weights = BackboneWeights.initialize(backbone_config, cfg.seed).unfreeze()
    backbone = Backbone(backbone_config, weights, tokenizer)
    params = weights.tensors
    opt = OptimizerState.create(params, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 3])

    initial = held_out_loss(backbone, held)
    logger.info(f"Pretraining {weights.parameter_count()} parameters for {cfg.steps} steps; "
                f"held-out loss {initial:.4f}")
    losses = []
    try:
        for step in tqdm(range(cfg.steps), desc="pretrain", disable=None):
            batch = rng.integers(len(train), size=cfg.batch_size)
            total = None
            for i in batch:
                loss = sequence_loss(backbone, train[int(i)])
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / cfg.batch_size)
            value = total.item()
            if not math.isfinite(value):
                reset_graph()
                raise TrainingDivergedError(f"non-finite pretraining loss {value} at step {step}")
            backward(total)
            grads = {k: p.grad for k, p in params.items()}
            adamw_step(params, grads, opt, cfg)
            for p in params.values():
                p.grad = None
            losses.append(value)
    except Exception as e:
        logger.error(f"Error during pretraining: {e}")
        raise

    weights.freeze()
    final = held_out_loss(backbone, held)
    if cfg.steps and final >= initial:
        logger.warning(f"held-out loss did not decrease during pretraining ({initial:.4f} -> {final:.4f})")
    else:
        logger.info(f"Pretraining done: held-out loss {initial:.4f} -> {final:.4f}")
    return backbone, losses
