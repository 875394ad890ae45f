"""Exception types shared by all modules."""


class MagnetohomError(Exception):
    """Base class."""


class ValidationError(MagnetohomError, ValueError):
    """Invalid input or configuration."""


class AssemblyError(MagnetohomError):
    """Finite element assembly failed (for instance a degenerate triangle)."""


class NumericalError(MagnetohomError):
    """A numerical procedure failed."""


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=float("nan"), iterations=0, step=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.step = step


class SingularLimitError(NumericalError):
    """The averaged inverse mass is (numerically) singular."""
