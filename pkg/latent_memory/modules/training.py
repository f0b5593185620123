"""
Type-1 training of the memory read parameters through the frozen backbone
"""
from dataclasses import dataclass, field, asdict
import json
import logging
import math
from pathlib import Path

import numpy as np
from tqdm import tqdm

from config import (
    LEARNING_RATE, WEIGHT_DECAY, WARMUP_STEPS, GRAD_CLIP, EPOCHS, BATCH_SIZE, GRAD_ACCUMULATION,
    WINDOW_TURNS, PATIENCE, ADAM_BETAS, ADAM_EPS, VALIDATION_FRACTION
)
from utils.errors import ConfigError, ContractError, TrainingDivergedError
from utils.tensor import add, scale, take_rows, cross_entropy, detach, backward, no_grad, reset_graph

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    warmup_steps: int = WARMUP_STEPS
    grad_clip: float = GRAD_CLIP
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    grad_accumulation: int = GRAD_ACCUMULATION
    window_turns: int = WINDOW_TURNS
    patience: int = PATIENCE
    seed: int = 0
    validation_fraction: float = VALIDATION_FRACTION
    max_steps: int = 0
    session_probes: bool = True
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0 and grad_clip > 0")
        for name in ('epochs', 'batch_size', 'grad_accumulation', 'window_turns', 'patience'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_steps < 0 or self.max_steps < 0:
            raise ConfigError("warmup_steps and max_steps must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")

    @property
    def effective_batch(self):
        return self.batch_size * self.grad_accumulation

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        return data


@dataclass
class OptimizerState:
    """AdamW moments per parameter name"""
    weight_decay: float
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params, weight_decay):
        return cls(
            weight_decay=weight_decay,
            first={k: np.zeros_like(p.data) for k, p in params.items()},
            second={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def learning_rate_at(step, cfg):
    """Linear warmup over the first warmup_steps steps (step counts from 1)"""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate


def global_grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values() if g is not None))


def clip_grad_norm(grads, max_norm):
    """Scale grads in place so their global norm is at most max_norm; returns the pre-clip norm"""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * np.asarray(coef, dtype=g.dtype)
    return norm


def adamw_step(params, grads, opt, cfg):
    """
    One AdamW update with decoupled weight decay, bias correction, warmup and
    global-norm clipping. Parameters with no gradient are left untouched.
    Returns (pre-clip grad norm, learning rate used).
    """
    grads = dict(grads)
    norm = clip_grad_norm(grads, cfg.grad_clip)
    opt.step += 1
    lr = learning_rate_at(opt.step, cfg)
    beta1, beta2 = cfg.betas
    correction1 = 1.0 - beta1 ** opt.step
    correction2 = 1.0 - beta2 ** opt.step
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        p = param.data
        if opt.weight_decay:
            p -= lr * opt.weight_decay * p
        m = opt.first[name]
        v = opt.second[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
    return norm, lr


# ----------------------------------------------------------------------
# Examples
# ----------------------------------------------------------------------

@dataclass
class Example:
    """One forward pass: a dialogue turn (written to memory) or a QA probe (not written)"""
    tokens: list
    positions: list
    targets: list
    write: bool

    @classmethod
    def turn(cls, tokens):
        return cls(tokens, list(range(len(tokens) - 1)), tokens[1:], True)

    @classmethod
    def probe(cls, question_tokens, answer_tokens):
        tokens = question_tokens + answer_tokens
        start = len(question_tokens) - 1
        return cls(tokens, list(range(start, start + len(answer_tokens))), answer_tokens, False)


def dialogue_windows(dialogue, tokenizer, window_turns, session_probes=True, max_context=None):
    """
    Examples of one dialogue in conversation order, grouped into windows of
    window_turns dialogue turns. Each turn is followed by the probes asked after it.
    """
    asked = {}
    for qa in dialogue.qa:
        asked.setdefault(qa.ask_after_turn, []).append(qa)
    ends = {g: s for s, g in dialogue.session_ends().items()} if session_probes else {}

    windows = []
    current = []
    turns_in_window = 0
    for g, _, turn in dialogue.turns():
        tokens = tokenizer.encode_turn(turn.speaker, turn.text)
        if max_context:
            tokens = tokens[-max_context:]
        if len(tokens) >= 2:
            current.append(Example.turn(tokens))
        probes = list(asked.get(g, []))
        if g in ends:
            probes += [qa for qa in dialogue.qa if max(qa.evidence) <= g <= qa.valid_until and qa not in probes]
        for qa in probes:
            current.append(Example.probe(tokenizer.encode_question(qa.question), tokenizer.encode_answer(qa.answer)))
        turns_in_window += 1
        if turns_in_window == window_turns:
            windows.append(current)
            current = []
            turns_in_window = 0
    if current:
        windows.append(current)
    return windows


def example_loss(backbone, adapter, state, example):
    """(loss tensor, hidden states) for one example read against state"""
    hidden, logits = backbone.forward(example.tokens, adapter.hooks(state))
    loss = cross_entropy(take_rows(logits, example.positions), example.targets)
    return loss, hidden


def run_window(backbone, adapter, state, window):
    """Mean example loss over a window; writes after each dialogue turn. Returns (loss, next state)."""
    total = None
    for example in window:
        loss, hidden = example_loss(backbone, adapter, state, example)
        total = loss if total is None else add(total, loss)
        if example.write and not adapter.is_baseline:
            state = adapter.write(state, detach(hidden.final), [detach(h) for h in hidden.layer_inputs])
    return scale(total, 1.0 / len(window)), state


# ----------------------------------------------------------------------
# Validation / training
# ----------------------------------------------------------------------

def split_dialogues(dialogues, fraction, seed):
    """Hold out a fraction of dialogues (by dialogue) for validation"""
    n = len(dialogues)
    n_val = max(1, int(round(n * fraction)))
    if n - n_val < 1:
        raise ConfigError(f"cannot split {n} dialogue(s) into non-empty training and validation sets")
    order = np.random.default_rng([seed, 1]).permutation(n)
    val = sorted(int(i) for i in order[:n_val])
    return [dialogues[i] for i in range(n) if i not in val], [dialogues[i] for i in val]


def validate(backbone, adapter, dialogues, cfg=None):
    """Mean example loss over the validation dialogues, without gradient recording"""
    cfg = cfg or TrainConfig()
    if not dialogues:
        raise ConfigError("validation set is empty")
    losses = []
    with no_grad():
        for dialogue in dialogues:
            state = adapter.init_memory()
            for window in dialogue_windows(dialogue, backbone.tokenizer, cfg.window_turns, cfg.session_probes,
                                           backbone.config.max_context):
                for example in window:
                    loss, hidden = example_loss(backbone, adapter, state, example)
                    losses.append(loss.item())
                    if example.write and not adapter.is_baseline:
                        state = adapter.write(state, hidden.final, hidden.layer_inputs)
    return float(np.mean(losses))


def _assert_frozen(backbone, adapter):
    for name, t in backbone.weights.tensors.items():
        if t.grad is not None or t.requires_grad:
            raise ContractError(f"backbone weight {name} is trainable or received a gradient")
    for name, t in adapter.write_params.items():
        if t.grad is not None or t.requires_grad:
            raise ContractError(f"write projection {name} is trainable or received a gradient")


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float('inf')
    stopped_early: bool = False

    @property
    def train_losses(self):
        return [s['loss'] for s in self.steps]


class Type1Trainer:
    """Trains an adapter's read parameters; the backbone and write projections stay fixed"""

    def __init__(self, backbone, adapter, cfg=None, log_path=None):
        if adapter.is_baseline:
            raise ConfigError("the stateless baseline has no parameters to train")
        if not backbone.weights.frozen:
            raise ContractError("the backbone must be frozen before adapter training")
        self.backbone = backbone
        self.adapter = adapter.unfreeze()
        self.cfg = cfg or TrainConfig()
        self.log_path = Path(log_path) if log_path else None
        self.params = adapter.trainable()
        self.opt = OptimizerState.create(self.params, self.cfg.weight_decay)
        self.history = TrainHistory()
        self._pending = 0

    def _log_step(self, record):
        self.history.steps.append(record)
        logger.debug(f"step {record['step']}: loss {record['loss']:.4f} grad norm {record['grad_norm']:.4f}")
        if self.log_path:
            with open(self.log_path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def _step(self, epoch, window_index, losses):
        grads = {}
        for name, p in self.params.items():
            grads[name] = None if p.grad is None else p.grad / self._pending
        norm, lr = adamw_step(self.params, grads, self.opt, self.cfg)
        self.adapter.zero_grad()
        _assert_frozen(self.backbone, self.adapter)
        self._log_step({
            'step': self.opt.step, 'epoch': epoch, 'window': window_index,
            'loss': float(np.mean(losses)), 'grad_norm': norm, 'lr': lr,
        })
        self._pending = 0

    def _diverged(self, loss_value):
        norms = {k: float(np.linalg.norm(p.grad)) for k, p in self.params.items() if p.grad is not None}
        reset_graph()
        raise TrainingDivergedError(
            f"non-finite loss {loss_value} at step {self.opt.step + 1} for {self.adapter.method.label}; "
            f"grad norms {norms}"
        )

    def _budget_left(self):
        return not self.cfg.max_steps or self.opt.step < self.cfg.max_steps

    def train_epoch(self, dialogues, epoch):
        """One pass in lockstep batches of dialogues; each processed window is one backward"""
        cfg = self.cfg
        tokenizer = self.backbone.tokenizer
        rng = np.random.default_rng([cfg.seed, epoch])
        order = [dialogues[int(i)] for i in rng.permutation(len(dialogues))]
        per_step = cfg.effective_batch
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            windows = [dialogue_windows(d, tokenizer, cfg.window_turns, cfg.session_probes,
                                        self.backbone.config.max_context) for d in batch]
            states = [self.adapter.init_memory() for _ in batch]
            for w in range(max(len(ws) for ws in windows)):
                for b, ws in enumerate(windows):
                    if w >= len(ws) or not self._budget_left():
                        continue
                    loss, states[b] = run_window(self.backbone, self.adapter, states[b], ws[w])
                    value = loss.item()
                    if not math.isfinite(value):
                        self._diverged(value)
                    backward(loss)
                    losses.append(value)
                    self._pending += 1
                    if self._pending == per_step:
                        self._step(epoch, w, losses)
                        losses = []
        if self._pending and self._budget_left():
            self._step(epoch, -1, losses)
        self._pending = 0
        self.adapter.zero_grad()

    def fit(self, train_dialogues, val_dialogues):
        cfg = self.cfg
        backbone_digest = self.backbone.digest()
        write_digest = {k: t.data.tobytes() for k, t in self.adapter.write_params.items()}
        best = {k: p.data.copy() for k, p in self.params.items()}
        bad_epochs = 0
        try:
            for epoch in tqdm(range(cfg.epochs), desc=f"train {self.adapter.method.label}", disable=None):
                self.train_epoch(train_dialogues, epoch)
                val_loss = validate(self.backbone, self.adapter, val_dialogues, cfg)
                self.history.val_losses.append(val_loss)
                logger.info(f"epoch {epoch}: validation loss {val_loss:.4f} after {self.opt.step} steps")
                if val_loss < self.history.best_val_loss:
                    self.history.best_val_loss = val_loss
                    self.history.best_epoch = epoch
                    best = {k: p.data.copy() for k, p in self.params.items()}
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= cfg.patience:
                        self.history.stopped_early = True
                        logger.info(f"early stop: no validation improvement for {bad_epochs} epochs")
                        break
                if not self._budget_left():
                    break
        except Exception as e:
            logger.error(f"Error training {self.adapter.method.label} adapter: {e}")
            raise

        for k, p in self.params.items():
            p.data[...] = best[k]
        if self.backbone.digest() != backbone_digest:
            raise ContractError("backbone weights changed during adapter training")
        if any(t.data.tobytes() != write_digest[k] for k, t in self.adapter.write_params.items()):
            raise ContractError("write projections changed during adapter training")
        self.adapter.freeze()
        return self.adapter, self.history


def type1_train(backbone, adapter, dialogues, cfg=None, val_dialogues=None, log_path=None):
    """Train adapter read parameters; returns (frozen adapter, TrainHistory)"""
    cfg = cfg or TrainConfig()
    if val_dialogues is None:
        dialogues, val_dialogues = split_dialogues(dialogues, cfg.validation_fraction, cfg.seed)
    if not dialogues:
        raise ConfigError("training set is empty")
    trainer = Type1Trainer(backbone, adapter, cfg, log_path)
    logger.info(
        f"Training {adapter.method.label} ({adapter.dims.capacity}) on {len(dialogues)} dialogues, "
        f"validating on {len(val_dialogues)}; {adapter.parameter_count()['trained']} trained parameters"
    )
    return trainer.fit(dialogues, val_dialogues)
