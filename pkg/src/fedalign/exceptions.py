"""Exception hierarchy shared by every module."""


class FedAlignError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FedAlignError, ValueError):
    pass


class DegenerateInputError(FedAlignError, ValueError):
    pass


class ParameterError(FedAlignError, ValueError):
    pass


class EmptySupportError(FedAlignError, ValueError):
    pass


class FormatError(FedAlignError, ValueError):
    pass


class ConfigError(FedAlignError, ValueError):
    pass


class GenerationError(FedAlignError, RuntimeError):
    pass


class ContractError(FedAlignError, RuntimeError):
    """A call sequence contract was violated (e.g. backward on a stale cache)."""


class InvariantViolation(FedAlignError, RuntimeError):
    """A runtime invariant check failed during a simulation."""
