"""Exception hierarchy shared by every latentmark module."""


class LatentmarkError(Exception):
    """Base class for all library errors."""


class ConfigurationError(LatentmarkError, ValueError):
    """Invalid configuration value (schedule kind, attack strength, ...)."""


class ContractError(LatentmarkError, ValueError):
    """An argument violates an operation's precondition (shape, length)."""


class NumericDomainError(LatentmarkError, ArithmeticError):
    """A value fell outside the numerically safe domain."""


class TrainingError(LatentmarkError, RuntimeError):
    """Training diverged or missed its targets.

    ``metrics`` carries the final diagnostics so callers can log them.
    """

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = dict(metrics or {})


class AdapterMissingError(LatentmarkError, LookupError):
    """An external adapter (attacker, metric, backend) is not registered."""


class CapacityError(LatentmarkError):
    """The identity registry cannot place another payload under its distance floor."""


class FormatError(LatentmarkError, ValueError):
    """A persisted file is malformed or has the wrong magic/version."""
