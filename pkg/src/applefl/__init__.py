"""Deterministic simulator of adaptive personalized cross-silo federated learning."""

from .apple import SchedulerSpec, prox_center, scheduler_value
from .config import RunConfig, parse_config
from .data import Dataset, FederatedSplit, PartitionSpec
from .errors import AppleFLError, ConfigError, DataError, IngestionError, NumericError
from .numerics import ModelSpec, param_count

__version__ = "0.1.0"

__all__ = [
    "AppleFLError",
    "ConfigError",
    "DataError",
    "Dataset",
    "FederatedSplit",
    "IngestionError",
    "ModelSpec",
    "NumericError",
    "PartitionSpec",
    "RunConfig",
    "SchedulerSpec",
    "param_count",
    "parse_config",
    "prox_center",
    "scheduler_value",
]
