"""Exception hierarchy shared across the package."""


class FlowctlError(Exception):
    """Base class for all errors raised by flowctl."""


class DomainError(FlowctlError, ValueError):
    """A schedule quantity was requested outside its domain of definition."""


class ScheduleError(FlowctlError, ValueError):
    """A schedule or rate table is invalid."""


class NumericalError(FlowctlError, FloatingPointError):
    """A NaN or Inf appeared in a simulated state."""


class TrainingDiverged(FlowctlError, RuntimeError):
    pass


class GridMismatch(FlowctlError, ValueError):
    pass


class DimensionMismatch(FlowctlError, ValueError):
    pass


class CostError(FlowctlError, ValueError):
    pass


class ConfigError(FlowctlError, ValueError):
    pass


class KeyMismatch(FlowctlError, KeyError):
    pass


class UnknownCandidate(FlowctlError, KeyError):
    pass


class NoMatches(FlowctlError, ValueError):
    pass


class IntegrityError(FlowctlError, RuntimeError):
    """A checkpoint or artifact failed verification."""
