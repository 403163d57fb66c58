"""Exception hierarchy for the bitflex package.

All contract violations raise subclasses of BitflexError so the CLI can
map them to exit codes without string matching.
"""


class BitflexError(Exception):
    """Base class for all library errors."""


class ShapeError(BitflexError, ValueError):
    """Tensor-op argument shapes are inconsistent."""


class ContractError(BitflexError, ValueError):
    """An operation precondition was violated (bad bit-width, range, ...)."""


class ConfigError(BitflexError, ValueError):
    """A run configuration failed validation."""


class ModelFileError(BitflexError, ValueError):
    """A serialized model file is malformed, corrupt, or incompatible."""


class TrainingDiverged(BitflexError, RuntimeError):
    """Training aborted because the loss became non-finite."""
