"""
Exception hierarchy for the latent memory system
"""


class LatentMemoryError(Exception):
    """Base class for all errors raised by this package"""


class DimensionError(LatentMemoryError, ValueError):
    """Tensor shapes do not agree at an op boundary"""


class DegenerateRowError(LatentMemoryError, ValueError):
    """A softmax row has no finite entry"""


class TargetIndexError(LatentMemoryError, IndexError):
    """A target token id lies outside the vocabulary"""


class GraphConsumedError(LatentMemoryError, RuntimeError):
    """backward() was called twice on the same recorded graph"""


class NonFiniteError(LatentMemoryError, FloatingPointError):
    """Checked mode caught a NaN or +Inf produced by an op"""


class ContextLengthError(LatentMemoryError, ValueError):
    """Input is longer than the backbone context window"""


class ContractError(LatentMemoryError, RuntimeError):
    """A caller broke an interface contract (detached inputs, state variants)"""


class ConfigError(LatentMemoryError, ValueError):
    """Invalid or unsatisfiable configuration"""


class ValidationError(LatentMemoryError, ValueError):
    """Input data failed validation"""


class SnapshotMismatchError(LatentMemoryError, ValueError):
    """A memory snapshot does not belong to the handle it is restored into"""


class TrainingDivergedError(LatentMemoryError, RuntimeError):
    """Loss became NaN during adapter training"""


class EqualInputViolation(LatentMemoryError, RuntimeError):
    """Evaluation conditions did not consume identical inputs"""


class EmptyCurveError(LatentMemoryError, ValueError):
    """No results to build a forgetting curve from"""


__all__ = [
    'LatentMemoryError', 'DimensionError', 'DegenerateRowError', 'TargetIndexError',
    'GraphConsumedError', 'NonFiniteError', 'ContextLengthError', 'ContractError',
    'ConfigError', 'ValidationError', 'SnapshotMismatchError', 'TrainingDivergedError',
    'EqualInputViolation', 'EmptyCurveError',
]
