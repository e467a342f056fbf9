"""Exception hierarchy.  The CLI maps these onto exit codes."""


class TAConvError(Exception):
    """Base class for all package errors."""


class ShapeError(TAConvError, ValueError):
    """Tensor or configuration shapes do not line up."""


class NumericalError(TAConvError, ArithmeticError):
    """NaN/Inf values, divergence, or a failed numerical precondition."""


class DataError(TAConvError):
    """Malformed or inconsistent input data."""


class CalibrationError(NumericalError):
    """Severity calibration could not reach its target."""
