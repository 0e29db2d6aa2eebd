"""Deterministic single-process federated-learning benchmark.

Evaluates FedSGD/FedAvg on five axes: model accuracy, communication volume,
simulated wall time, gradient-leakage privacy, and non-IID robustness.
"""

from . import attacks, config, data, metrics, neural, protocol, runner, strategies
from .errors import (ConfigError, DataError, DivergedError, FedBenchError,
                     MetricError, NumericError, PartitionError, ProtocolError)

__version__ = "0.1.0"

__all__ = [
    "attacks", "config", "data", "metrics", "neural", "protocol", "runner",
    "strategies", "ConfigError", "DataError", "DivergedError", "FedBenchError",
    "MetricError", "NumericError", "PartitionError", "ProtocolError",
]
