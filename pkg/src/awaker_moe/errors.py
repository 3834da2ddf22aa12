"""Exception hierarchy for awaker-moe.

Every error raised on purpose by the package derives from ``AwakerError`` and
carries an ``exit_code`` that the command line uses directly.
"""


class AwakerError(Exception):
    """Base class for all awaker-moe errors."""

    exit_code = 3


class ConfigError(AwakerError):
    """Invalid configuration, hyperparameter or pipeline order."""

    exit_code = 2


class InputError(AwakerError):
    """Empty or malformed input data (corpus, split, logs, instruction)."""

    exit_code = 2


class ShapeError(AwakerError):
    """Tensor dimensions do not agree, or a scalar was required."""


class NumericError(AwakerError):
    """NaN inputs or a loss with nothing to average over."""


class RoutingError(AwakerError):
    """Missing routing context or an MoE layer with no gate to consult."""


class CheckpointError(AwakerError):
    """Checkpoint file is corrupt, truncated or of an unknown format."""


class InvariantError(AwakerError):
    """A self-check property did not hold."""
