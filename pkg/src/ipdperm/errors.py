"""Exception hierarchy and stable CLI exit codes."""


class IpdPermError(Exception):
    """Base class for all package-specific errors."""

    exit_code = 1


class DataError(IpdPermError):
    """Malformed input data (CSV schema, non-finite values, bad labels)."""

    exit_code = 2


class NonIdentifiableError(IpdPermError):
    """Design is rank-deficient (single-arm study, constant baseline, ...)."""

    exit_code = 3


class ConvergenceError(IpdPermError):
    """Optimizer exhausted its budget; carries the best state seen so far."""

    exit_code = 3

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class FactorizationError(IpdPermError):
    """Covariance block is not positive definite."""

    exit_code = 3


class DfUndefinedError(IpdPermError):
    """Satterthwaite denominator is non-positive (degenerate information)."""

    exit_code = 3


class KrAdjustmentError(IpdPermError):
    """Kenward-Roger adjusted covariance has a non-positive (theta, theta) entry."""

    exit_code = 3


class UnreliableDistributionError(IpdPermError):
    """Too many permutation refits failed to converge (> 5% of N)."""

    exit_code = 4


class SearchRangeError(IpdPermError):
    """No grid point rejected; reports the exhausted search range."""

    exit_code = 5

    def __init__(self, message, exhausted_range=None):
        super().__init__(message)
        self.exhausted_range = exhausted_range


class ConfigError(IpdPermError):
    """Invalid simulation configuration (unknown key, bad value)."""

    exit_code = 6
