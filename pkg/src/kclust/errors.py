"""Exception hierarchy. Each class maps to one CLI exit code."""


class KClustError(Exception):
    exit_code = 1


class InputError(KClustError, ValueError):
    """Malformed input: bad indices, unknown fields, non-laminar families."""

    exit_code = 2


class ValidationError(KClustError):
    """A solution or structure violates a stated invariant."""

    exit_code = 1


class InvariantViolation(ValidationError):
    pass


class ConfigError(KClustError, ValueError):
    exit_code = 2


class InfeasibleError(KClustError):
    exit_code = 3


class SizeError(KClustError):
    exit_code = 3


class SolverError(KClustError):
    exit_code = 3

    def __init__(self, message, iterations=None, residuals=None):
        super().__init__(message)
        self.iterations = iterations
        self.residuals = residuals
