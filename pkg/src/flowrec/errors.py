"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: ConfigError -> 1, DataError -> 2, NumericError -> 3.
"""


class FlowRecError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FlowRecError):
    """Invalid or inconsistent configuration."""


class DataError(FlowRecError):
    """Malformed input data, vocab, or checkpoint file."""


class DimensionError(DataError):
    """Shape mismatch between tensors; message names both shapes."""


class NumericError(FlowRecError):
    """Non-finite value encountered during training or optimization."""


class UndefinedMetricError(FlowRecError):
    """Metric has no defined value on the given sample (e.g. one-class AUC)."""
