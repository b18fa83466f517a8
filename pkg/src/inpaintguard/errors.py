"""Error types shared across the package.

Each failure class gets its own exception so callers can react to the
specific contract that was violated instead of parsing messages.
"""


class DimensionError(ValueError):
    """Operand shapes or sizes violate an operation's contract."""


class ContractError(ValueError):
    """An API was called outside its documented domain."""


class ConfigError(ValueError):
    """A configuration value or config file is invalid."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf; never propagated silently."""


class CheckpointError(RuntimeError):
    """A checkpoint is missing tensors, has wrong shapes, or a bad config echo."""


class TrainingError(RuntimeError):
    """Training diverged or could not run; message carries the step index."""


class AttackError(RuntimeError):
    """A protection run failed; message carries the iteration index."""
