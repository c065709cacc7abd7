"""Exception hierarchy shared by all stages.

Each class carries the CLI exit code its stage reports when it escapes.
"""


class DeepLMError(Exception):
    exit_code = 1


class ConfigError(DeepLMError, ValueError):
    """Invalid configuration value; the message names the offending field."""

    exit_code = 2


class DataError(DeepLMError, ValueError):
    exit_code = 3


class DataConsistencyError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class EmptyClassError(DataError):
    """A binary task received only one class."""


class SplitError(DataError):
    pass


class ScalerError(DataError):
    pass


class ArchitectureError(ConfigError):
    pass


class ContractViolation(DeepLMError, RuntimeError):
    """Caller broke an operation's precondition (stale cache, bad shapes...)."""


class UndefinedMetricError(DataError):
    pass


class ConvergenceError(DeepLMError, RuntimeError):
    exit_code = 4

    def __init__(self, message, gradient_norm=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class NonFiniteGradientError(ConvergenceError):
    pass


class BootstrapError(DeepLMError, RuntimeError):
    exit_code = 4


class StageError(DeepLMError):
    """A pipeline stage could not find an upstream artifact."""

    exit_code = 3


class StalenessError(StageError):
    """An upstream artifact changed since the stage that produced it ran."""
