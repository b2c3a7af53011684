"""Exception hierarchy shared by the whole kit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4, ProtocolError -> 5. Anything else is a bug and escapes
as a traceback.
"""


class ResidenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ResidenError):
    """Invalid configuration: unknown keys, bad values, incompatible widths."""


class DimensionError(ConfigError):
    """Tensor shapes do not satisfy an operation's contract."""


class DataError(ResidenError):
    """Malformed manifest rows, missing images, out-of-range intensities."""


class LabelError(DataError):
    """Labels outside their admissible set (non-binary AU bits, bad class index)."""


class NumericError(ResidenError):
    """Non-finite values where the contract requires finite ones."""


class ProtocolError(ResidenError):
    """Cross-dataset AU lists that cannot be aligned, or mismatched eval setups."""


class UsageError(ResidenError):
    """API misuse: non-scalar loss in backward, mismatched vector lengths."""


class UndefinedMetricError(DataError):
    """A metric was requested on an empty population; never silently zero."""
