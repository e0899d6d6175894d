"""Exception hierarchy shared by every engine layer.

The CLI maps the three families (validation, provider, storage) onto
distinct exit codes, and the HTTP facade maps them onto status codes.
"""

from __future__ import annotations


class MemoryEngineError(Exception):
    """Base class for all engine errors."""


class MemoryValidationError(MemoryEngineError):
    """Input or provider output failed a contract check."""

    def __init__(self, message: str, violations: list[str] | None = None) -> None:
        super().__init__(message)
        self.violations = list(violations or [])


class PreconditionError(MemoryValidationError, ValueError):
    """An operation was called with arguments outside its domain."""


class ConfigError(MemoryValidationError):
    """An EngineConfig value is out of bounds."""


class RejectedFactError(MemoryValidationError):
    """One or more extracted facts or units violated their invariants."""


class TemporalParseError(MemoryValidationError):
    """A temporal expression resolved to an inverted range."""


class BackgroundRejectedError(MemoryValidationError):
    """A merged background failed the length or first-person check."""


class ProviderError(MemoryEngineError):
    """A model-backed provider failed or timed out."""


class RetainFailedError(ProviderError):
    """Retain aborted because a provider kept failing after retries."""


class StorageError(MemoryEngineError):
    """Persistence failed."""


class SnapshotError(StorageError):
    """A snapshot file is corrupt, truncated or inconsistent."""


class UnsupportedVersionError(SnapshotError):
    """A snapshot was written with an unknown format version."""


class NotFoundError(MemoryEngineError):
    """The requested bank does not exist."""
