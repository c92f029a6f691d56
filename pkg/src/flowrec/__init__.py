"""Multi-scenario multi-task recommender with learnable flow pruning.

A shared embedding feeds a scenario stage and a task stage, each split
into shared and specific low-rank units. The four resulting information
flows per task are fused additively; a per-instance gate network learns
which flows to subtract back out, and a second training stage retrains
the model under the frozen discrete gates.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FlowRecError,
    NumericError,
    UndefinedMetricError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "FlowRecError",
    "NumericError",
    "UndefinedMetricError",
    "__version__",
]
