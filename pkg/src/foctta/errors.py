"""Exception hierarchy shared by every module."""


class FocttaError(Exception):
    """Base class for all package errors."""


class GraphError(FocttaError):
    """Invalid graph construction (shape mismatch, bad layer config)."""


class NumericError(FocttaError):
    """Non-finite values or a violated numeric contract."""


class UsageError(FocttaError):
    """API called out of order, e.g. backward without a forward tape."""


class PlanError(FocttaError):
    """Adaptation plan refers to layers that do not exist or may not be trained."""


class ConfigError(FocttaError):
    """Invalid experiment, data or selection configuration."""


class ProfilingError(FocttaError):
    """Warm-up profiling could not produce an importance vector."""
