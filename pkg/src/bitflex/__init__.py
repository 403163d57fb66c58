"""bitflex: quantized neural networks with switchable bit-widths.

A single set of stored weights serves several precisions at once: the
model keeps per-bit-width batch-norm statistics and (optionally)
per-bit-width activation clipping levels, and integer weight codes
convert exactly from any higher precision to any lower one by bit
shifting.
"""

from .errors import (
    BitflexError,
    ConfigError,
    ContractError,
    ModelFileError,
    ShapeError,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "BitflexError",
    "ConfigError",
    "ContractError",
    "ModelFileError",
    "ShapeError",
    "TrainingDiverged",
    "__version__",
]
