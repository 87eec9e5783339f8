"""Exception hierarchy shared across the package."""


class GSDError(Exception):
    """Base class for all package errors."""


class DimensionError(GSDError, ValueError):
    pass


class ContractError(GSDError, ValueError):
    pass


class ParameterError(GSDError, ValueError):
    pass


class RangeError(GSDError, ValueError):
    pass


class ConsistencyError(GSDError, RuntimeError):
    pass


class RotationDegeneracyError(GSDError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(GSDError, FloatingPointError):
    """Raised when a NaN shows up in a loss or gradient."""


class DataError(GSDError, IOError):
    """Malformed or missing dataset / checkpoint content."""
