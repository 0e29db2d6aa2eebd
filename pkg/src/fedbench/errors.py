"""Exception types shared across the package."""


class FedBenchError(Exception):
    """Base class for all package errors."""


class ConfigError(FedBenchError):
    """Invalid configuration: bad shapes, mismatched layouts, bad fields.

    `field` optionally carries the dotted path of the offending config key.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NumericError(FedBenchError):
    """Non-finite value produced during a forward or backward pass."""


class DataError(FedBenchError):
    """Dataset ingestion failure (bad magic, truncation, count mismatch)."""


class PartitionError(FedBenchError):
    """Not enough samples to satisfy a partition plan."""


class ProtocolError(FedBenchError):
    """Malformed wire payload (bad magic or length)."""


class DivergedError(FedBenchError):
    """Training produced a non-finite loss; the run is aborted."""

    def __init__(self, message: str, round_no: int | None = None):
        super().__init__(message)
        self.round_no = round_no


class MetricError(FedBenchError):
    """A metric cannot be computed (e.g. empty test set)."""
