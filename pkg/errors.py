"""Exceptions shared by the library and the command-line app."""


class SpectralError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ShapeError(SpectralError, ValueError):
    """Operands have incompatible shapes."""

    exit_code = 3


class PreconditionError(SpectralError, ValueError):
    """An input violates a documented precondition."""

    exit_code = 3


class FormatError(SpectralError):
    """A file on disk is malformed or does not match its header."""

    exit_code = 3


class ConfigError(FormatError):
    """A configuration document failed validation.

    `violations` holds every problem found, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


class NumericalError(SpectralError):
    """A numerical routine failed or produced non-finite values."""

    exit_code = 4


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap."""


class TrainingDiverged(NumericalError):
    """Training loss blew past the divergence threshold.

    The trace recorded up to the failing step is kept on `trace`.
    """

    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)
