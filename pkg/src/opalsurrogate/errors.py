"""Exception hierarchy shared across the package."""

from __future__ import annotations


class OpalError(Exception):
    """Base class for all package errors."""


class ShapeError(OpalError, ValueError):
    """Array dimensions do not match the architecture or each other."""


class ConfigError(OpalError, ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class CsvParseError(ConfigError):
    """CSV ingestion failure; carries the offending row/column when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(OpalError, RuntimeError):
    """A numerical routine failed (non-finite values, factorization failure)."""


class DivergenceError(NumericalError):
    """Optimization produced a non-finite loss; carries the iteration index."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class DegenerateEvidenceError(NumericalError):
    """Effective-parameter bookkeeping broke down (model too flexible for the data)."""


class MetricUndefinedError(NumericalError):
    """A validation metric has no defined value for the given samples."""


class CapabilityError(OpalError, RuntimeError):
    """The requested dense computation exceeds the configured size limit."""


class CoverageError(OpalError, ValueError):
    """An observable was requested outside the range covered by the data."""


class StateError(OpalError, RuntimeError):
    """An operation was called before its prerequisites were computed."""


class ArtifactVersionError(OpalError, RuntimeError):
    """A stored model artifact has an incompatible version."""
