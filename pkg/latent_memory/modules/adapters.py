"""
Memory adapters: trainable read parameters, fixed write projections and the
injection hooks that wire a memory state into the frozen backbone.
"""
from dataclasses import asdict
import logging

import numpy as np

from config import INIT_STD, GATE_BIAS_INIT, WRITE_DECAY
from modules.backbone import InjectionHooks, MemoryKV, BackboneConfig, causal_mask
from modules.memory import (
    MemoryMethod, WriteConfig, MemoryDims, BankState, HebbianState, SlotState,
    AttentionWriteParams, init_memory, write_attention, write_hebbian, write_slot
)
from utils.checkpoint import save_tensors, load_tensors
from utils.errors import ConfigError, ContractError
from utils.hashing import digest_arrays
from utils.tensor import (
    Tensor, add, mul, matmul, scale, transpose, concat_cols, slice_cols, softmax_rows, sigmoid
)

logger = logging.getLogger(__name__)

PREFIX_METHODS = (MemoryMethod.M1, MemoryMethod.M3, MemoryMethod.M6)
XATTN_METHODS = (MemoryMethod.M2, MemoryMethod.M5)

METHOD_TABLE = {
    MemoryMethod.M1: ("self-attention KV prefix", "KV prefix", "attention-coupled, one global bank", "constant"),
    MemoryMethod.M2: ("parallel cross-attention", "inserted cross-attention", "attention-coupled, one global bank", "constant"),
    MemoryMethod.M3: ("self-attention KV extension", "KV prefix", "attention-coupled, per layer", "constant"),
    MemoryMethod.M4: ("Hebbian / associative", "KV prefix", "Hebbian outer product", "O(d_h^2)"),
    MemoryMethod.M5: ("gated additive branch", "gated branch", "attention-coupled, one global bank", "constant"),
    MemoryMethod.M6: ("slot-based sparse write", "KV prefix", "top-k slot overwrite", "O(S d)"),
}


# ----------------------------------------------------------------------
# Parameter construction
# ----------------------------------------------------------------------

def _read_arrays(method, config, dims, rng, dtype):
    d, L = config.d_model, config.n_layers

    def normal(shape, std=INIT_STD):
        return (rng.standard_normal(shape) * std).astype(dtype)

    arrays = {}
    if method is MemoryMethod.M4:
        arrays['w_qh'] = normal((d, dims.d_h), 1.0 / np.sqrt(d))
        for layer in range(L):
            arrays[f'l{layer}.w_k_mem'] = normal((dims.d_h, d))
            arrays[f'l{layer}.w_v_mem'] = normal((dims.d_h, d))
        return arrays

    if method is MemoryMethod.M6:
        arrays['w_a'] = normal((d, d), 1.0 / np.sqrt(d))
        arrays['w_s'] = normal((d, d), 1.0 / np.sqrt(d))

    for layer in range(L):
        p = f'l{layer}.'
        if method in PREFIX_METHODS:
            arrays[p + 'w_k_mem'] = normal((d, d))
            arrays[p + 'w_v_mem'] = normal((d, d))
        else:
            for name in ('x_q', 'x_k', 'x_v', 'x_o'):
                arrays[p + name] = normal((d, d))
            if method is MemoryMethod.M2:
                arrays[p + 'beta'] = np.zeros(1, dtype)
            else:
                arrays[p + 'w_g'] = np.zeros((2 * d, d), dtype)
                arrays[p + 'b_g'] = np.full(d, GATE_BIAS_INIT, dtype)
    return arrays


def _write_arrays(method, config, dims, rng, dtype):
    """Fixed N(0, 1/d) write projections"""
    d = config.d_model
    std = 1.0 / np.sqrt(d)

    def normal(shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    if method is MemoryMethod.M4:
        return {'proj_k': normal((d, dims.d_h)), 'proj_v': normal((d, dims.d_h))}
    if method is MemoryMethod.M6:
        return {'w_v_w': normal((d, d))}
    if method is MemoryMethod.M3:
        arrays = {}
        for layer in range(config.n_layers):
            for name in ('w_q_w', 'w_k_w', 'w_v_w'):
                arrays[f'l{layer}.{name}'] = normal((d, d))
        return arrays
    return {name: normal((d, d)) for name in ('w_q_w', 'w_k_w', 'w_v_w')}


class MemoryAdapter:
    """θ_Mem for one method and capacity condition, plus its fixed write maps"""

    def __init__(self, method, backbone_config, dims, write_config, read_params, write_params, seed=0):
        self.method = MemoryMethod.parse(method)
        self.backbone_config = backbone_config
        self.dims = dims
        self.write_config = write_config
        self.read_params = dict(read_params)
        self.write_params = dict(write_params)
        self.seed = seed
        for t in self.write_params.values():
            t.requires_grad = False

    @classmethod
    def build(cls, method, backbone_config, capacity="1x", seed=0, decay=WRITE_DECAY, top_k=None,
              dtype=np.float32):
        method = MemoryMethod.parse(method)
        dims = MemoryDims.for_capacity(capacity, backbone_config.d_model, backbone_config.n_layers)
        write_config = WriteConfig(decay=decay, top_k=top_k or dims.top_k, capacity=capacity)
        if write_config.top_k > dims.slots:
            raise ConfigError(f"top_k={write_config.top_k} exceeds the {dims.slots} slots of capacity {capacity}")
        if method is MemoryMethod.BASELINE:
            return cls(method, backbone_config, dims, write_config, {}, {}, seed)
        rng = np.random.default_rng(seed)
        read = {k: Tensor(v, requires_grad=True) for k, v in _read_arrays(method, backbone_config, dims, rng, dtype).items()}
        write = {k: Tensor(v) for k, v in _write_arrays(method, backbone_config, dims, rng, dtype).items()}
        adapter = cls(method, backbone_config, dims, write_config, read, write, seed)
        logger.info(f"Built {method.label} adapter ({capacity}): {adapter.parameter_count()}")
        return adapter

    @property
    def is_baseline(self):
        return self.method is MemoryMethod.BASELINE

    def trainable(self):
        return self.read_params

    def freeze(self):
        for t in self.read_params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self):
        for t in self.read_params.values():
            t.requires_grad = True
        return self

    @property
    def frozen(self):
        return not any(t.requires_grad for t in self.read_params.values())

    def zero_grad(self):
        for t in self.read_params.values():
            t.grad = None

    def parameter_count(self):
        return {
            'trained': int(sum(t.size for t in self.read_params.values())),
            'fixed': int(sum(t.size for t in self.write_params.values())),
        }

    def read_digest(self):
        return digest_arrays({k: t.data for k, t in self.read_params.items()})

    def digest(self):
        arrays = {f'read.{k}': t.data for k, t in self.read_params.items()}
        arrays.update({f'write.{k}': t.data for k, t in self.write_params.items()})
        return digest_arrays(arrays)

    def astype(self, dtype):
        """Copy in another precision; the copy keeps each parameter's requires_grad"""
        return MemoryAdapter(
            self.method, self.backbone_config, self.dims, self.write_config,
            {k: t.astype(dtype) for k, t in self.read_params.items()},
            {k: t.astype(dtype) for k, t in self.write_params.items()},
            self.seed,
        )

    def init_memory(self, dtype=None):
        if self.is_baseline:
            return None
        if dtype is None:
            dtype = next(iter(self.write_params.values())).dtype
        return init_memory(self.method, self.write_config, self.dims, dtype)

    def hooks(self, state):
        if self.is_baseline:
            return InjectionHooks()
        return make_read_hooks(self, state)

    def write(self, state, final, layer_inputs=None):
        if self.is_baseline:
            return state
        return write_step(self, state, final, layer_inputs)

    def save(self, path, meta=None):
        info = {
            'method': self.method.value,
            'capacity': self.dims.capacity,
            'dims': asdict(self.dims),
            'write_config': asdict(self.write_config),
            'backbone_config': self.backbone_config.to_dict(),
            'seed': self.seed,
        }
        info.update(meta or {})
        tensors = {f'read.{k}': t.data for k, t in self.read_params.items()}
        tensors.update({f'write.{k}': t.data for k, t in self.write_params.items()})
        save_tensors(path, tensors, 'adapter', info)

    @classmethod
    def load(cls, path):
        """Load a frozen adapter"""
        try:
            arrays, meta = load_tensors(path, kind='adapter')
            method = MemoryMethod.parse(meta['method'])
            backbone_config = BackboneConfig.from_dict(meta['backbone_config'])
            dims = MemoryDims(**meta['dims'])
            write_config = WriteConfig(**meta['write_config'])
            read = {k[5:]: Tensor(v) for k, v in arrays.items() if k.startswith('read.')}
            write = {k[6:]: Tensor(v) for k, v in arrays.items() if k.startswith('write.')}
            expected = MemoryAdapter.build(method, backbone_config, dims.capacity, meta['seed'],
                                           write_config.decay, write_config.top_k)
            if set(read) != set(expected.read_params) or set(write) != set(expected.write_params):
                raise ConfigError(f"adapter checkpoint {path} does not hold the {method.label} parameter set")
            adapter = cls(method, backbone_config, dims, write_config, read, write, meta['seed'])
            logger.info(f"Loaded {method.label} adapter from {path}")
            return adapter.freeze()
        except Exception as e:
            logger.error(f"Error loading adapter {path}: {e}")
            raise


# ----------------------------------------------------------------------
# Read hooks
# ----------------------------------------------------------------------

def _open_mask(n, p, dtype):
    return np.zeros((n, p), dtype=dtype)


class PrefixMemoryHooks(InjectionHooks):
    """M.1 / M.3 / M.6: memory rows projected to keys and values and prepended to every layer"""

    def __init__(self, banks, params):
        self.banks = banks
        self.params = params

    def extra_kv(self, layer, n_tokens):
        bank = self.banks[layer] if len(self.banks) > 1 else self.banks[0]
        keys = matmul(bank, self.params[f'l{layer}.w_k_mem'])
        values = matmul(bank, self.params[f'l{layer}.w_v_mem'])
        return MemoryKV(keys, values, _open_mask(n_tokens, bank.shape[0], bank.dtype))


class HebbianMemoryHooks(InjectionHooks):
    """M.4: R = (H_emb W_QH) M, read per layer as token-aligned memory entries under a causal mask"""

    def __init__(self, matrix, params):
        self.matrix = matrix
        self.params = params
        self.retrieved = None

    def begin(self, embedded):
        self.retrieved = matmul(matmul(embedded, self.params['w_qh']), self.matrix)

    def extra_kv(self, layer, n_tokens):
        if self.retrieved is None or self.retrieved.shape[0] != n_tokens:
            raise ContractError("Hebbian read used before begin() saw this forward's embeddings")
        keys = matmul(self.retrieved, self.params[f'l{layer}.w_k_mem'])
        values = matmul(self.retrieved, self.params[f'l{layer}.w_v_mem'])
        return MemoryKV(keys, values, causal_mask(n_tokens, self.matrix.dtype))


def memory_cross_attention(hidden, bank, params, prefix, n_heads):
    """Multi-head attention from the residual stream onto the memory bank (no mask)"""
    d = hidden.shape[1]
    d_head = d // n_heads
    q = matmul(hidden, params[prefix + 'x_q'])
    k = matmul(bank, params[prefix + 'x_k'])
    v = matmul(bank, params[prefix + 'x_v'])
    heads = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), 1.0 / np.sqrt(d_head))
        heads.append(matmul(softmax_rows(scores), slice_cols(v, lo, hi)))
    merged = heads[0] if n_heads == 1 else concat_cols(*heads)
    return matmul(merged, params[prefix + 'x_o'])


class CrossAttentionMemoryHooks(InjectionHooks):
    """M.2: H + β c_Mem.  M.5: H + g ⊙ c_Mem with g = σ([H; c_Mem] W_g + b_g)."""

    def __init__(self, bank, params, n_heads, gated):
        self.bank = bank
        self.params = params
        self.n_heads = n_heads
        self.gated = gated

    def context(self, layer, hidden):
        return memory_cross_attention(hidden, self.bank, self.params, f'l{layer}.', self.n_heads)

    def gate(self, layer, hidden, context):
        p = f'l{layer}.'
        return sigmoid(add(matmul(concat_cols(hidden, context), self.params[p + 'w_g']), self.params[p + 'b_g']))

    def post_attention(self, layer, hidden):
        context = self.context(layer, hidden)
        if self.gated:
            return mul(self.gate(layer, hidden, context), context)
        return scale(context, self.params[f'l{layer}.beta'])


def _check_variant(method, state):
    expected = {
        MemoryMethod.M4: HebbianState,
        MemoryMethod.M6: SlotState,
    }.get(method, BankState)
    if state is None or not isinstance(state, expected) or state.method is not method:
        found = "no state" if state is None else f"{type(state).__name__} for {state.method.value}"
        raise ContractError(f"{method.label} needs a {expected.__name__}, got {found}")


def make_read_hooks(adapter, state):
    """Injection hooks reading `state` through the adapter's read parameters"""
    method = adapter.method
    _check_variant(method, state)
    params = adapter.read_params
    if method in (MemoryMethod.M1, MemoryMethod.M3):
        return PrefixMemoryHooks(state.banks, params)
    if method is MemoryMethod.M6:
        return PrefixMemoryHooks([state.slots], params)
    if method is MemoryMethod.M4:
        return HebbianMemoryHooks(state.matrix, params)
    return CrossAttentionMemoryHooks(state.banks[0], params, adapter.backbone_config.n_heads,
                                     gated=method is MemoryMethod.M5)


# ----------------------------------------------------------------------
# Write dispatch
# ----------------------------------------------------------------------

def _attention_params(write_params, prefix=''):
    return AttentionWriteParams(
        write_params[prefix + 'w_q_w'], write_params[prefix + 'w_k_w'], write_params[prefix + 'w_v_w']
    )


def write_step(adapter, state, final, layer_inputs=None):
    """Next memory state from detached hidden states; the turn counter advances by one"""
    method = adapter.method
    _check_variant(method, state)
    decay = adapter.write_config.decay
    wp = adapter.write_params

    if method in (MemoryMethod.M1, MemoryMethod.M2, MemoryMethod.M5):
        bank = write_attention(state.banks[0], final, _attention_params(wp), decay)
        return BankState(method, turn=state.turn + 1, banks=[bank])

    if method is MemoryMethod.M3:
        n_layers = adapter.backbone_config.n_layers
        if layer_inputs is None or len(layer_inputs) != n_layers:
            raise ContractError(f"M.3 writes need {n_layers} per-layer hidden states")
        banks = [
            write_attention(state.banks[layer], layer_inputs[layer], _attention_params(wp, f'l{layer}.'), decay)
            for layer in range(n_layers)
        ]
        return BankState(method, turn=state.turn + 1, banks=banks)

    if method is MemoryMethod.M4:
        matrix = write_hebbian(state.matrix, final, wp['proj_k'], wp['proj_v'], decay)
        return HebbianState(method, turn=state.turn + 1, matrix=matrix)

    rp = adapter.read_params
    slots, written = write_slot(state.slots, final, rp['w_a'], rp['w_s'], wp['w_v_w'], decay,
                                adapter.write_config.top_k)
    return SlotState(method, turn=state.turn + 1, slots=slots, last_written=written)


def describe_methods(backbone_config=None, capacity="1x"):
    """Design table for the six methods with trained parameter counts on this backbone"""
    backbone_config = backbone_config or BackboneConfig()
    rows = []
    for method, (name, injection, write, cost) in METHOD_TABLE.items():
        adapter = MemoryAdapter.build(method, backbone_config, capacity)
        rows.append({
            'method': method.label,
            'name': name,
            'injection': injection,
            'self_attention_safe': True,
            'write_mechanism': write,
            'memory_cost': cost,
            'memory_floats': int(sum(a.size for a in adapter.init_memory().arrays().values())),
            'trained_parameters': adapter.parameter_count()['trained'],
            'fixed_parameters': adapter.parameter_count()['fixed'],
        })
    return rows
