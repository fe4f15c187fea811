"""
Error taxonomy
Every error is a ValueError so callers can keep catching ValueError
"""


class DimensionError(ValueError):
    """Shapes of two operands do not fit together"""


class ConfigurationError(ValueError):
    """Invalid hyperparameter, config key or embedding length"""


class InputError(ValueError):
    """Invalid data handed to an operation"""


class CTCInfeasibleError(InputError):
    """The label sequence cannot be aligned to the given number of frames"""


class GuardError(ValueError):
    """Brute-force oracle instance is too large to enumerate"""


class EmbeddingParseError(ValueError):
    """Malformed embeddings CSV"""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CheckpointError(ValueError):
    """Checkpoint cannot be loaded or combined"""


class UsageError(ValueError):
    """A stage or command was invoked without its prerequisites"""
