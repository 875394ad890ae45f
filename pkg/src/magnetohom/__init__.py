"""Homogenization laboratory for elastodynamics under oscillating skew magnetic fields."""
from ._kernels import BACKEND
from .errors import (AssemblyError, ConvergenceError, MagnetohomError, NumericalError,
                     SingularLimitError, ValidationError)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AssemblyError",
    "ConvergenceError",
    "MagnetohomError",
    "NumericalError",
    "SingularLimitError",
    "ValidationError",
    "__version__",
]
