"""Error types shared across the package.

All subclass ValueError so callers can catch broadly; the concrete class
names the contract that was violated.
"""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ParameterError(ValueError):
    """A configuration value or call argument is outside its allowed range."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class VocabularyError(ValueError):
    """An item or attribute id falls outside the known vocabulary."""


class DatasetError(ValueError):
    """Raw data could not be parsed or produced an unusable dataset."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (e.g. zero-norm vector for cosine)."""


class CheckpointError(ValueError):
    """Checkpoint file is missing, corrupt, or from an incompatible version."""
