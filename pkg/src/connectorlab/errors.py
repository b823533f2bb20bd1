"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
ShapeError/ConfigError/DataError -> 2, NumericError -> 3.
"""


class ConnectorLabError(Exception):
    """Base class for all package errors."""


class UsageError(ConnectorLabError):
    """Bad command-line invocation or malformed run configuration file."""


class ShapeError(ConnectorLabError):
    """Tensor dimensions (or dtypes) do not line up for an operation."""


class ConfigError(ConnectorLabError):
    """Inconsistent or invalid hyperparameters / component wiring."""


class DataError(ConnectorLabError):
    """Invalid input data: bad image, empty split, missing artifact, id out of range."""


class NumericError(ConnectorLabError):
    """Non-finite values, divergence, or other numeric failure states."""


class GraphError(ConnectorLabError):
    """Misuse of the autodiff graph, e.g. running backward twice without reset."""
