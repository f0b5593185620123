"""
Frozen decoder-only transformer (GPT-2 style, pre-norm blocks, tied output head)
"""
from collections import namedtuple
from dataclasses import dataclass, asdict
import logging

import numpy as np

from config import (
    BACKBONE_LAYERS, BACKBONE_D_MODEL, BACKBONE_HEADS, BACKBONE_VOCAB, BACKBONE_CONTEXT,
    BACKBONE_MLP_RATIO, INIT_STD, LAYER_NORM_EPS
)
from modules.tokenizer import WordTokenizer
from utils.checkpoint import save_tensors, load_tensors
from utils.errors import ConfigError, ContextLengthError, ContractError, DimensionError
from utils.hashing import digest_arrays
from utils.tensor import (
    Tensor, add, matmul, scale, transpose, concat_rows, concat_cols, slice_cols, take_rows,
    softmax_rows, gelu, layer_norm, no_grad
)

logger = logging.getLogger(__name__)

MemoryKV = namedtuple('MemoryKV', ['keys', 'values', 'mask'])
GenerationResult = namedtuple('GenerationResult', ['tokens', 'new_tokens', 'truncated'])


@dataclass
class BackboneConfig:
    """Backbone hyperparameters. d_k / d_v default to d_model // n_heads."""
    n_layers: int = BACKBONE_LAYERS
    d_model: int = BACKBONE_D_MODEL
    n_heads: int = BACKBONE_HEADS
    vocab_size: int = BACKBONE_VOCAB
    max_context: int = BACKBONE_CONTEXT
    mlp_ratio: int = BACKBONE_MLP_RATIO
    d_k: int = 0
    d_v: int = 0

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1 or self.mlp_ratio < 1:
            raise ConfigError(f"backbone sizes must be positive: {self}")
        if not self.d_k:
            self.d_k = self.d_model // self.n_heads
        if not self.d_v:
            self.d_v = self.d_model // self.n_heads
        if self.n_heads * self.d_k != self.d_model or self.n_heads * self.d_v != self.d_model:
            raise ConfigError(
                f"n_heads * d_k and n_heads * d_v must equal d_model "
                f"({self.n_heads}*{self.d_k}, {self.n_heads}*{self.d_v} vs {self.d_model})"
            )
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_context < 1:
            raise ConfigError(f"max_context must be >= 1, got {self.max_context}")

    @property
    def d_mlp(self):
        return self.d_model * self.mlp_ratio

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _layer_names(layer):
    p = f"h{layer}."
    return [p + s for s in (
        'ln_1.g', 'ln_1.b', 'attn.w_q', 'attn.b_q', 'attn.w_k', 'attn.b_k', 'attn.w_v', 'attn.b_v',
        'attn.w_o', 'attn.b_o', 'ln_2.g', 'ln_2.b', 'mlp.w_fc', 'mlp.b_fc', 'mlp.w_proj', 'mlp.b_proj',
    )]


class LayerView:
    """Name-scoped access to one block's weights"""

    def __init__(self, tensors, layer):
        self._tensors = tensors
        self._prefix = f"h{layer}."

    def __getitem__(self, name):
        return self._tensors[self._prefix + name]


class BackboneWeights:
    """All backbone parameters, keyed by GPT-2 style names"""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = dict(tensors)

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        d, L = config.d_model, config.n_layers
        proj_std = INIT_STD / np.sqrt(2 * L)

        def normal(shape, std=INIT_STD):
            return (rng.standard_normal(shape) * std).astype(dtype)

        arrays = {
            'wte': normal((config.vocab_size, d)),
            'wpe': normal((config.max_context, d), 0.01),
        }
        for layer in range(L):
            p = f"h{layer}."
            arrays.update({
                p + 'ln_1.g': np.ones(d, dtype), p + 'ln_1.b': np.zeros(d, dtype),
                p + 'attn.w_q': normal((d, d)), p + 'attn.b_q': np.zeros(d, dtype),
                p + 'attn.w_k': normal((d, d)), p + 'attn.b_k': np.zeros(d, dtype),
                p + 'attn.w_v': normal((d, d)), p + 'attn.b_v': np.zeros(d, dtype),
                p + 'attn.w_o': normal((d, d), proj_std), p + 'attn.b_o': np.zeros(d, dtype),
                p + 'ln_2.g': np.ones(d, dtype), p + 'ln_2.b': np.zeros(d, dtype),
                p + 'mlp.w_fc': normal((d, config.d_mlp)), p + 'mlp.b_fc': np.zeros(config.d_mlp, dtype),
                p + 'mlp.w_proj': normal((config.d_mlp, d), proj_std), p + 'mlp.b_proj': np.zeros(d, dtype),
            })
        arrays['ln_f.g'] = np.ones(d, dtype)
        arrays['ln_f.b'] = np.zeros(d, dtype)
        return cls(config, {k: Tensor(v) for k, v in arrays.items()})

    @staticmethod
    def expected_names(config):
        names = ['wte', 'wpe']
        for layer in range(config.n_layers):
            names.extend(_layer_names(layer))
        return names + ['ln_f.g', 'ln_f.b']

    def layer(self, index):
        return LayerView(self.tensors, index)

    def __getitem__(self, name):
        return self.tensors[name]

    def freeze(self):
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self):
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.tensors.values())

    def digest(self):
        return digest_arrays({k: t.data for k, t in self.tensors.items()})

    def astype(self, dtype):
        copy = BackboneWeights(self.config, {k: Tensor(t.data.astype(dtype)) for k, t in self.tensors.items()})
        return copy.freeze()

    def parameter_count(self):
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class HiddenStates:
    """Inputs to every layer plus the final normalised state H_t"""
    layer_inputs: list
    final: Tensor

    def __len__(self):
        return len(self.layer_inputs) + 1

    def as_list(self):
        return list(self.layer_inputs) + [self.final]


class InjectionHooks:
    """Per-layer injection points. The base class injects nothing."""

    def begin(self, embedded):
        """Called once per forward with the embedding-layer output"""

    def extra_kv(self, layer, n_tokens):
        """Return MemoryKV(keys p x h*d_k, values p x h*d_v, mask n x p) or None"""
        return None

    def post_attention(self, layer, hidden):
        """Return an additive update for the post-attention residual stream, or None"""
        return None


def causal_mask(n, dtype=np.float32):
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def causal_self_attention(hidden, layer_weights, n_heads, extra_kv=None, return_weights=False):
    """
    Multi-head causal self-attention over [K_mem; K] / [V_mem; V] with mask [mem_mask | causal].

    hidden: normalised layer input (n x d). Returns the projected output (n x d), plus the
    per-head attention weight matrices when return_weights is set.
    """
    n, d = hidden.shape
    d_head = d // n_heads
    q = add(matmul(hidden, layer_weights['attn.w_q']), layer_weights['attn.b_q'])
    k = add(matmul(hidden, layer_weights['attn.w_k']), layer_weights['attn.b_k'])
    v = add(matmul(hidden, layer_weights['attn.w_v']), layer_weights['attn.b_v'])

    mask = causal_mask(n, hidden.dtype)
    if extra_kv is not None:
        keys_mem, values_mem, mem_mask = extra_kv
        p = keys_mem.shape[0]
        if keys_mem.shape != (p, d) or values_mem.shape != (p, d):
            raise DimensionError(
                f"memory keys/values must be {p} x {d} (per-head {d_head} x {n_heads}), "
                f"got {keys_mem.shape} and {values_mem.shape}"
            )
        mem_mask = np.asarray(mem_mask, dtype=hidden.dtype)
        if mem_mask.shape != (n, p):
            raise DimensionError(f"memory mask must be {n} x {p}, got {mem_mask.shape}")
        if not np.all((mem_mask == 0) | np.isneginf(mem_mask)):
            raise ContractError("memory mask entries must be 0 or -inf")
        mask = np.concatenate([mem_mask, mask], axis=1)
    mask = Tensor(mask)

    heads = []
    weights = []
    inv_sqrt = 1.0 / np.sqrt(d_head)
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        q_h = slice_cols(q, lo, hi)
        k_h = slice_cols(k, lo, hi)
        v_h = slice_cols(v, lo, hi)
        if extra_kv is not None:
            k_h = concat_rows(slice_cols(keys_mem, lo, hi), k_h)
            v_h = concat_rows(slice_cols(values_mem, lo, hi), v_h)
        scores = add(scale(matmul(q_h, transpose(k_h)), inv_sqrt), mask)
        attn = softmax_rows(scores)
        weights.append(attn)
        heads.append(matmul(attn, v_h))

    merged = heads[0] if n_heads == 1 else concat_cols(*heads)
    out = add(matmul(merged, layer_weights['attn.w_o']), layer_weights['attn.b_o'])
    if return_weights:
        return out, weights
    return out


def mlp_block(hidden, layer_weights):
    h = gelu(add(matmul(hidden, layer_weights['mlp.w_fc']), layer_weights['mlp.b_fc']))
    return add(matmul(h, layer_weights['mlp.w_proj']), layer_weights['mlp.b_proj'])


class Backbone:
    """D_frozen: a small pretrained transformer that only ever runs forward for adapters"""

    def __init__(self, config, weights, tokenizer=None):
        self.config = config
        self.weights = weights
        self.tokenizer = tokenizer or WordTokenizer.from_lexicon()
        if self.tokenizer.size > config.vocab_size:
            raise ConfigError(
                f"tokenizer has {self.tokenizer.size} words but vocab_size is {config.vocab_size}"
            )

    def forward(self, tokens, hooks=None):
        """Return (HiddenStates, logits n x V). Hooks may add memory KV or residual updates."""
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        if n == 0:
            raise ContextLengthError("forward needs at least one token")
        if n > self.config.max_context:
            raise ContextLengthError(f"{n} tokens exceed the context window of {self.config.max_context}")
        hooks = hooks or InjectionHooks()
        w = self.weights

        x = add(take_rows(w['wte'], tokens), take_rows(w['wpe'], np.arange(n)))
        hooks.begin(x)
        layer_inputs = []
        for layer in range(self.config.n_layers):
            lw = w.layer(layer)
            layer_inputs.append(x)
            normed = layer_norm(x, lw['ln_1.g'], lw['ln_1.b'], LAYER_NORM_EPS)
            kv = hooks.extra_kv(layer, n)
            x = add(x, causal_self_attention(normed, lw, self.config.n_heads, kv))
            delta = hooks.post_attention(layer, x)
            if delta is not None:
                x = add(x, delta)
            x = add(x, mlp_block(layer_norm(x, lw['ln_2.g'], lw['ln_2.b'], LAYER_NORM_EPS), lw))

        final = layer_norm(x, w['ln_f.g'], w['ln_f.b'], LAYER_NORM_EPS)
        logits = matmul(final, transpose(w['wte']))
        return HiddenStates(layer_inputs, final), logits

    def generate(self, tokens, hooks=None, max_new=1, greedy=True):
        """Greedy decoding; stops after the end-of-answer token or at the context limit"""
        if not greedy:
            raise ConfigError("only greedy decoding is supported")
        sequence = [int(t) for t in tokens]
        new_tokens = []
        truncated = False
        with no_grad():
            for _ in range(max_new):
                if len(sequence) >= self.config.max_context:
                    truncated = True
                    logger.warning(f"generation stopped at the context limit ({self.config.max_context})")
                    break
                _, logits = self.forward(sequence, hooks)
                next_id = int(np.argmax(logits.data[-1]))
                sequence.append(next_id)
                new_tokens.append(next_id)
                if next_id == self.tokenizer.eoa_id:
                    break
        return GenerationResult(sequence, new_tokens, truncated)

    def digest(self):
        return self.weights.digest()

    def astype(self, dtype):
        return Backbone(self.config, self.weights.astype(dtype), self.tokenizer)

    def save(self, path, meta=None):
        info = {'config': self.config.to_dict(), 'vocabulary': self.tokenizer.vocabulary}
        info.update(meta or {})
        save_tensors(path, {k: t.data for k, t in self.weights.tensors.items()}, 'backbone', info)

    @classmethod
    def load(cls, path):
        try:
            arrays, meta = load_tensors(path, kind='backbone')
            config = BackboneConfig.from_dict(meta['config'])
            missing = set(BackboneWeights.expected_names(config)) - set(arrays)
            if missing:
                raise ConfigError(f"backbone checkpoint {path} lacks tensors: {sorted(missing)[:5]}")
            weights = BackboneWeights(config, {k: Tensor(v) for k, v in arrays.items()}).freeze()
            backbone = cls(config, weights, WordTokenizer(meta['vocabulary']))
            logger.info(f"Loaded backbone {path} ({weights.parameter_count()} parameters)")
            return backbone
        except Exception as e:
            logger.error(f"Error loading backbone {path}: {e}")
            raise
