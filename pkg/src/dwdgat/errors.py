"""Exception hierarchy shared across the pipeline.

The CLI maps these onto its exit codes: configuration problems exit with 2,
data and runtime problems with 3.
"""


class DWDGATError(Exception):
    pass


class ConfigError(DWDGATError, ValueError):
    """Invalid configuration or shapes that do not conform."""


class DataError(DWDGATError, ValueError):
    """Malformed or degenerate input data that cannot be processed."""


class NumericError(DWDGATError, ArithmeticError):
    """Non-finite values where the computation requires finite ones."""
