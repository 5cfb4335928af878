"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config/budget problems exit 2,
numerical failures exit 3, checkpoint/file problems exit 4.
"""


class OlicaError(Exception):
    pass


class ConfigError(OlicaError, ValueError):
    """Invalid pruning configuration."""


class BudgetError(OlicaError, ValueError):
    """The requested sparsity cannot be allocated onto the model's shapes."""


class DecompositionError(OlicaError, ArithmeticError):
    """A matrix decomposition failed to converge."""


class SingularityError(DecompositionError):
    """A linear system was singular or too ill-conditioned to solve."""


class CheckpointError(OlicaError):
    pass


class CheckpointVersionError(CheckpointError):
    """Unrecognized container magic or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """A manifest entry points past the end of the payload."""


class CheckpointShapeError(CheckpointError):
    """Tensor shapes are inconsistent with the model configuration."""


class CheckpointDataError(CheckpointError):
    """A stored tensor contains NaN or Inf values."""
