"""
Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op computes its output with numpy and, when at least one
input requires a gradient and recording is enabled, appends a node to the
tape of the calling thread. backward() walks the tape in reverse creation order, which is a
valid topological order, and accumulates gradients into leaf tensors.

Only two-dimensional row-major tensors are supported by the matrix ops, with
one broadcasting exception: a bias vector may be added to every row.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

from utils.errors import (
    DimensionError, DegenerateRowError, TargetIndexError, GraphConsumedError,
    NonFiniteError, ContractError
)

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_GELU_C = np.sqrt(2.0 / np.pi)


class Node:
    """One recorded op: inputs, output and the local backward rule"""

    __slots__ = ('name', 'inputs', 'output', 'backward_fn', 'consumed')

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"<Node {self.name}>"


class Tape:
    """Ordered record of the differentiable ops applied since the last reset"""

    def __init__(self):
        self.nodes = []
        self.recording = True
        self.checked = False

    def record(self, node):
        self.nodes.append(node)

    def reset(self):
        """Discard every recorded node. Tensors from a discarded graph cannot be backpropagated."""
        for node in self.nodes:
            node.consumed = True
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def get_tape():
    """The calling thread's tape; each thread records and backpropagates independently"""
    tape = getattr(_local, 'tape', None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_graph():
    get_tape().reset()


def graph_size():
    return len(get_tape())


@contextmanager
def no_grad():
    """Run a block without recording any op on the tape"""
    tape = get_tape()
    previous = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = previous


@contextmanager
def checked_mode(enabled=True):
    """Raise NonFiniteError whenever an op produces NaN or +Inf"""
    tape = get_tape()
    previous = tape.checked
    tape.checked = enabled
    try:
        yield
    finally:
        tape.checked = previous


class Tensor:
    """A dense array with optional gradient tracking"""

    __slots__ = ('data', 'requires_grad', 'grad', '_node')

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        """Value copy in another precision, keeping requires_grad"""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scale(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng, shape, std, dtype=DEFAULT_DTYPE, requires_grad=False):
    """Gaussian tensor drawn from a numpy Generator"""
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=requires_grad)


def _check_finite(name, out):
    if get_tape().checked and (np.isnan(out).any() or np.isposinf(out).any()):
        raise NonFiniteError(f"{name} produced a non-finite value")


def _make(name, out, inputs, backward_fn):
    """Wrap an op result and record it when any input is tracked"""
    _check_finite(name, out)
    tape = get_tape()
    tracked = tape.recording and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=tracked)
    if tracked:
        node = Node(name, inputs, result, backward_fn)
        result._node = node
        tape.record(node)
    return result


def _require_2d(name, x):
    if x.ndim != 2:
        raise DimensionError(f"{name} expects a 2-D tensor, got shape {x.shape}")


# ----------------------------------------------------------------------
# Differentiable ops
# ----------------------------------------------------------------------

def matmul(a, b):
    """Matrix product of a (m x k) and b (k x n)"""
    _require_2d('matmul', a)
    _require_2d('matmul', b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make('matmul', out, (a, b), backward_fn)


def add(a, b):
    """Elementwise sum of equal shapes, or a 2-D tensor plus a row bias vector"""
    if a.shape == b.shape:
        out = a.data + b.data

        def backward_fn(g):
            return g, g

        return _make('add', out, (a, b), backward_fn)

    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        out = a.data + b.data

        def backward_bias(g):
            return g, g.sum(axis=0)

        return _make('add_bias', out, (a, b), backward_bias)

    raise DimensionError(f"add shapes do not match: {a.shape} + {b.shape}")


def mul(a, b):
    """Elementwise product of equal shapes"""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes do not match: {a.shape} * {b.shape}")
    out = a.data * b.data

    def backward_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _make('mul', out, (a, b), backward_fn)


def scale(x, factor):
    """Multiply by a python scalar or by a one-element tensor"""
    if not isinstance(factor, Tensor):
        c = float(factor)
        out = x.data * np.asarray(c, dtype=x.dtype)

        def backward_const(g):
            return (g * c,)

        return _make('scale', out, (x,), backward_const)

    if factor.size != 1:
        raise DimensionError(f"scale factor must have one element, got shape {factor.shape}")
    s = factor.data.reshape(())
    out = x.data * s

    def backward_fn(g):
        gx = g * s if x.requires_grad else None
        gs = np.sum(g * x.data).reshape(factor.shape) if factor.requires_grad else None
        return gx, gs

    return _make('scale', out, (x, factor), backward_fn)


def transpose(x):
    _require_2d('transpose', x)
    out = np.ascontiguousarray(x.data.T)

    def backward_fn(g):
        return (g.T,)

    return _make('transpose', out, (x,), backward_fn)


def concat(tensors, axis):
    """Concatenate 2-D tensors along rows (axis=0) or columns (axis=1)"""
    tensors = tuple(tensors)
    for t in tensors:
        _require_2d('concat', t)
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat axis {axis} shapes disagree: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make('concat', out, tensors, backward_fn)


def concat_rows(*tensors):
    return concat(tensors, axis=0)


def concat_cols(*tensors):
    return concat(tensors, axis=1)


def slice_cols(x, start, stop):
    _require_2d('slice_cols', x)
    if not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"column slice [{start}:{stop}] outside shape {x.shape}")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make('slice_cols', out, (x,), backward_fn)


def take_rows(x, indices):
    """Gather rows by integer index (embedding lookup, loss-position selection)"""
    _require_2d('take_rows', x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take_rows indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise TargetIndexError(f"row index out of range for shape {x.shape}")
    out = x.data[idx]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make('take_rows', out, (x,), backward_fn)


def sum_all(x):
    """Sum of all entries as a scalar tensor"""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g):
        return (np.full_like(x.data, g),)

    return _make('sum', out, (x,), backward_fn)


def softmax_rows(x):
    """Row-wise softmax, stabilised by the row maximum; -inf entries map to exactly 0"""
    _require_2d('softmax_rows', x)
    row_max = x.data.max(axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        bad = int(np.flatnonzero(np.isneginf(row_max[:, 0]))[0])
        raise DegenerateRowError(f"softmax row {bad} has no finite entry")
    e = np.exp(x.data - row_max)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make('softmax_rows', s, (x,), backward_fn)


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make('sigmoid', out, (x,), backward_fn)


def gelu(x):
    """GPT-2 tanh approximation of GELU"""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * d_inner),)

    return _make('gelu', out.astype(v.dtype), (x,), backward_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalisation to zero mean / unit variance, then affine"""
    _require_2d('layer_norm', x)
    d = x.shape[1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm shapes disagree: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=0)
        if bias.requires_grad:
            gbias = g.sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = (rstd / d) * (
                d * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
        return gx, ggain, gbias

    return _make('layer_norm', out, (x, gain, bias), backward_fn)


def cross_entropy(logits, targets):
    """Mean negative log-softmax of the target entries"""
    _require_2d('cross_entropy', logits)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if tgt.shape[0] != n:
        raise DimensionError(f"cross_entropy has {n} rows but {tgt.shape[0]} targets")
    if n == 0:
        raise DimensionError("cross_entropy needs at least one row")
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise TargetIndexError(f"target id outside [0, {vocab})")
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - row_max
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(n)
    out = np.asarray(-log_probs[rows, tgt].mean(), dtype=logits.dtype)

    def backward_fn(g):
        probs = np.exp(log_probs)
        probs[rows, tgt] -= 1.0
        return (probs * (g / n),)

    return _make('cross_entropy', out, (logits,), backward_fn)


def detach(x):
    """Value-identical tensor severed from the graph"""
    return Tensor(x.data, requires_grad=False)


# ----------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------

def backward(loss):
    """Populate .grad on every tracked leaf reachable from a scalar loss"""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise ContractError("loss is not attached to a recorded graph")
    if loss._node.consumed:
        raise GraphConsumedError("this graph was already consumed by a previous backward()")

    tape = get_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            else:
                key = id(tensor)
                grads[key] = grad if key not in grads else grads[key] + grad

    logger.debug(f"backward through {len(tape.nodes)} nodes")
    tape.reset()


__all__ = [
    'Tensor', 'Tape', 'Node', 'get_tape', 'reset_graph', 'graph_size', 'no_grad',
    'checked_mode', 'zeros', 'randn', 'matmul', 'add', 'mul', 'scale', 'transpose',
    'concat', 'concat_rows', 'concat_cols', 'slice_cols', 'take_rows', 'sum_all',
    'softmax_rows', 'sigmoid', 'gelu', 'layer_norm', 'cross_entropy', 'detach', 'backward',
]
