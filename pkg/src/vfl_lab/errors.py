"""Exception types shared across the package."""


class VflLabError(Exception):
    """Base class for all errors raised by vfl_lab."""


class ConfigurationError(VflLabError, ValueError):
    """Invalid hyperparameters, dimensions or experiment configuration."""


class ShapeError(VflLabError, ValueError):
    """Array shapes do not line up."""


class DataError(VflLabError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(VflLabError, ArithmeticError):
    """A computation produced NaN or Inf."""
