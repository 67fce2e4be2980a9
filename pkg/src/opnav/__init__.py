"""Optical navigation toolkit.

Camera modeling and calibration, star-based attitude, planet line-of-sight
extraction, celestial triangulation, resolved-body localization and
measurement-only batch orbit determination, plus a synthetic-scene generator
used as ground truth throughout the test suite.
"""

__version__ = "0.1.0"


class OpnavError(Exception):
    """Base class for toolkit errors."""


class ParameterError(OpnavError, ValueError):
    """Invalid argument or violated precondition."""


class DegenerateGeometryError(OpnavError, ArithmeticError):
    """The observation geometry does not determine the requested unknowns."""


class ConvergenceError(OpnavError, ArithmeticError):
    """An iterative solver failed to converge."""
