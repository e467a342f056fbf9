"""Transform-augmented convolutions on a small numpy autodiff core."""
from .errors import CalibrationError, DataError, NumericalError, ShapeError, TAConvError

__version__ = "0.1.0"

__all__ = ["CalibrationError", "DataError", "NumericalError", "ShapeError", "TAConvError", "__version__"]
