"""downcast: multiscale graph time-series forecasting with missing data."""

from .errors import ContractError, CsvParseError, DimensionError
from .model import ForwardTrace, Model, ModelConfig
from .training import DataBundle, MetricsReport, TrainConfig, TrainResult, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "CsvParseError",
    "DimensionError",
    "ForwardTrace",
    "Model",
    "ModelConfig",
    "DataBundle",
    "MetricsReport",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "train",
    "__version__",
]
