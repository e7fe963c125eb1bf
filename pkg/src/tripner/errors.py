"""Exception hierarchy shared across the package.

Exit codes follow the CLI contract: 2 for configuration/usage problems,
3 for data validation failures, 4 for runtime failures.
"""


class TripnerError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ConfigError(TripnerError):
    """Bad configuration: unknown protocol, overlapping type sets, invalid flags."""

    exit_code = 2


class DataValidationError(TripnerError):
    """Malformed or inconsistent input data (parse failures, out-of-bounds spans)."""

    exit_code = 3


class CodecError(TripnerError):
    """Invalid encode/decode request: unregistered type, index out of range."""


class ModelError(TripnerError):
    """Model contract violation: registry/prefix mismatch, oversized input."""


class DistillError(TripnerError):
    """Distillation failure: registry mismatch, missing threshold, bad alignment."""


class TrainerError(TripnerError):
    """Training orchestration failure: missing teacher, bad target index."""


class MetricsError(TripnerError):
    """Evaluation failure: empty type set, missing coarse label, step mismatch."""


class ReportError(TripnerError):
    """Report generation failure: missing metrics for requested steps."""
