"""Exception types shared across the package."""

from __future__ import annotations


class ShotscanError(Exception):
    """Base class for all package errors."""


class ConfigError(ShotscanError):
    """Invalid or inconsistent configuration."""


class DatasetError(ShotscanError):
    """Malformed dataset file or a schema/invariant violation."""


class TemplateError(ShotscanError):
    """A prompt template cannot be validated or rendered."""


class BackendError(ShotscanError):
    """A scoring backend failed."""


class TransportError(BackendError):
    """HTTP transport failed after exhausting retries."""


class ProtocolError(BackendError):
    """The backend answered, but the response violates the scoring protocol."""


class SelectionError(ShotscanError):
    """Too few exemplars survive the z-score threshold to build both sets."""


class OracleGuardError(ShotscanError):
    """Requested enumeration exceeds the brute-force budget."""


class EngineAbort(ShotscanError):
    """A trial aborted mid-run; carries records from trials completed before it."""

    def __init__(self, message: str, partial_records=()):
        super().__init__(message)
        self.partial_records = tuple(partial_records)
