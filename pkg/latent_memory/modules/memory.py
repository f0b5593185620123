"""
Persistent memory states, capacity dimensions and the write rules.

Write rules run without gradient recording and refuse hidden states that are
still attached to a graph: persistent state never carries a graph across turns.
"""
from dataclasses import dataclass, field
import enum
import logging

import numpy as np

from config import CAPACITY_DIMS, WRITE_DECAY
from utils.errors import ConfigError, ContractError, DimensionError
from utils.hashing import digest_arrays
from utils.tensor import Tensor, add, matmul, scale, transpose, softmax_rows, no_grad

logger = logging.getLogger(__name__)


class MemoryMethod(enum.Enum):
    BASELINE = "baseline"
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    M4 = "m4"
    M5 = "m5"
    M6 = "m6"

    @classmethod
    def parse(cls, tag):
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower().replace(".", ""))
        except ValueError:
            raise ConfigError(f"unknown memory method {tag!r}; expected one of {[m.value for m in cls]}")

    @property
    def label(self):
        return "M.0" if self is MemoryMethod.BASELINE else f"M.{self.value[1:]}"


BANK_METHODS = (MemoryMethod.M1, MemoryMethod.M2, MemoryMethod.M3, MemoryMethod.M5)


@dataclass
class WriteConfig:
    decay: float = WRITE_DECAY
    top_k: int = CAPACITY_DIMS["1x"]["top_k"]
    capacity: str = "1x"

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"write decay must lie in (0, 1], got {self.decay}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.capacity not in CAPACITY_DIMS:
            raise ConfigError(f"unknown capacity condition {self.capacity!r}")


@dataclass(frozen=True)
class MemoryDims:
    """Memory sizes for one capacity condition on one backbone"""
    d_model: int
    n_layers: int
    n_p: int
    d_h: int
    slots: int
    top_k: int
    capacity: str = "1x"

    @classmethod
    def for_capacity(cls, capacity, d_model, n_layers):
        if capacity not in CAPACITY_DIMS:
            raise ConfigError(f"unknown capacity condition {capacity!r}; expected one of {list(CAPACITY_DIMS)}")
        dims = CAPACITY_DIMS[capacity]
        return cls(d_model=d_model, n_layers=n_layers, n_p=dims["n_p"], d_h=dims["d_h"],
                   slots=dims["slots"], top_k=dims["top_k"], capacity=capacity)


@dataclass
class MemoryState:
    method: MemoryMethod
    turn: int = 0

    def arrays(self):
        raise NotImplementedError

    def digest(self):
        return digest_arrays(self.arrays())

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in self.arrays().values())))


@dataclass
class BankState(MemoryState):
    """Dense bank P (n_P x d); M.3 keeps one bank per layer"""
    banks: list = field(default_factory=list)

    def arrays(self):
        return {f"bank.{i}": b.data for i, b in enumerate(self.banks)}


@dataclass
class HebbianState(MemoryState):
    """Associative matrix M (d_h x d_h)"""
    matrix: Tensor = None

    def arrays(self):
        return {"hebbian": self.matrix.data}


@dataclass
class SlotState(MemoryState):
    """Slot bank (S x d) and the slot indices changed by the last write"""
    slots: Tensor = None
    last_written: tuple = ()

    def arrays(self):
        return {"slots": self.slots.data}


def init_memory(method, config, dims, dtype=np.float32):
    """Zero-initialised state of the right variant and shape"""
    method = MemoryMethod.parse(method)
    d = dims.d_model
    if method in BANK_METHODS:
        count = dims.n_layers if method is MemoryMethod.M3 else 1
        return BankState(method, banks=[Tensor(np.zeros((dims.n_p, d), dtype)) for _ in range(count)])
    if method is MemoryMethod.M4:
        return HebbianState(method, matrix=Tensor(np.zeros((dims.d_h, dims.d_h), dtype)))
    if method is MemoryMethod.M6:
        if not 1 <= config.top_k <= dims.slots:
            raise ConfigError(f"top_k={config.top_k} must lie in [1, {dims.slots}]")
        return SlotState(method, slots=Tensor(np.zeros((dims.slots, d), dtype)))
    raise ConfigError(f"method {method.value!r} has no persistent memory")


def restore_state(method, arrays, turn, last_written=()):
    """Rebuild a state from snapshot arrays"""
    method = MemoryMethod.parse(method)
    if method in BANK_METHODS:
        banks = [Tensor(arrays[f"bank.{i}"]) for i in range(len(arrays))]
        return BankState(method, turn=turn, banks=banks)
    if method is MemoryMethod.M4:
        return HebbianState(method, turn=turn, matrix=Tensor(arrays["hebbian"]))
    if method is MemoryMethod.M6:
        return SlotState(method, turn=turn, slots=Tensor(arrays["slots"]), last_written=tuple(last_written))
    raise ConfigError(f"method {method.value!r} has no persistent memory")


@dataclass
class AttentionWriteParams:
    """Fixed random write projections W_Q^w, W_K^w, W_V^w, entries ~ N(0, 1/d)"""
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def initialize(cls, d, rng, dtype=np.float32):
        std = 1.0 / np.sqrt(d)
        return cls(*(Tensor((rng.standard_normal((d, d)) * std).astype(dtype)) for _ in range(3)))


def _require_detached(hidden, rule):
    if hidden.requires_grad or not hidden.is_leaf:
        raise ContractError(f"{rule} needs a detached hidden state; detach H before writing")


def write_attention(bank, hidden, params, decay):
    """P_t = γ P + A_tᵀ V_w with A_t = softmax(Q_w K_wᵀ / √d), Q_w = H W_Q^w, K_w = P W_K^w, V_w = H W_V^w"""
    _require_detached(hidden, "write_attention")
    if hidden.shape[1] != bank.shape[1]:
        raise DimensionError(f"hidden {hidden.shape} and bank {bank.shape} disagree on d")
    with no_grad():
        d = bank.shape[1]
        q_w = matmul(hidden, params.w_q)
        k_w = matmul(bank, params.w_k)
        v_w = matmul(hidden, params.w_v)
        attn = softmax_rows(scale(matmul(q_w, transpose(k_w)), 1.0 / np.sqrt(d)))
        return add(scale(bank, decay), matmul(transpose(attn), v_w))


def write_hebbian(matrix, hidden, proj_k, proj_v, decay):
    """M_t = γ M + (1/n) (H proj_K)ᵀ (H proj_V)"""
    _require_detached(hidden, "write_hebbian")
    n = hidden.shape[0]
    with no_grad():
        keys = matmul(hidden, proj_k)
        values = matmul(hidden, proj_v)
        update = scale(matmul(transpose(keys), values), 1.0 / n)
        return add(scale(matrix, decay), update)


def slot_affinity(slots, hidden, w_a, w_s):
    """a_ij = (H W_A)_i · (P W_S)_j / √d  (n x S)"""
    d = slots.shape[1]
    with no_grad():
        return scale(matmul(matmul(hidden, w_a), transpose(matmul(slots, w_s))), 1.0 / np.sqrt(d))


def write_slot(slots, hidden, w_a, w_s, w_v, decay, top_k):
    """
    Sparse top-k slot write. Returns (new slots, written index tuple).

    Slots ranked by α_j = max_i a_ij (ties go to the lower index); each chosen slot becomes
    γ P_j + (1-γ) v_j with v_j = Σ_i softmax_i(a_ij) (H W_V^w)_i. Other rows are copied unchanged.
    """
    _require_detached(hidden, "write_slot")
    n_slots = slots.shape[0]
    if not 1 <= top_k <= n_slots:
        raise ConfigError(f"top_k={top_k} must lie in [1, {n_slots}]")
    with no_grad():
        affinity = slot_affinity(slots, hidden, w_a, w_s)
        alpha = affinity.data.max(axis=0)
        written = np.sort(np.argsort(-alpha, kind='stable')[:top_k])
        token_weights = softmax_rows(transpose(affinity))
        values = matmul(token_weights, matmul(hidden, w_v)).data

    dtype = slots.dtype
    gamma = np.asarray(decay, dtype=dtype)
    keep = np.asarray(1.0 - decay, dtype=dtype)
    new = slots.data.copy()
    new[written] = gamma * slots.data[written] + keep * values[written].astype(dtype)
    return Tensor(new), tuple(int(j) for j in written)
