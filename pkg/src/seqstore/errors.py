"""Exception hierarchy shared by every seqstore module."""

from __future__ import annotations


class SeqStoreError(Exception):
    """Base class for all errors raised by seqstore."""


class ConfigError(SeqStoreError, ValueError):
    """A configuration document or argument is invalid."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DuplicateEventError(SeqStoreError):
    """Two events of one user share (timestamp, event_id)."""


class EncodingError(SeqStoreError, ValueError):
    """A column value cannot be represented by the chosen encoding."""


class StaleGenerationError(SeqStoreError):
    """The requested immutable-store generation is not live and not retained."""


class MonotonicityError(SeqStoreError):
    """A generation older than the live one was published."""


class CoverageGapError(SeqStoreError):
    """Some event range is covered by neither the mutable nor the immutable tier."""


class ReconstructionError(SeqStoreError):
    """Training-time reconstruction disagrees with the logged version metadata."""


class O2OViolationError(ReconstructionError):
    """Reconstructed history differs from the inference-time snapshot."""


class ScrubDivergenceError(ReconstructionError):
    """A deletion scrub rewrote history after the snapshot was logged."""


class FutureLeakageError(SeqStoreError):
    """A reconstructed sequence contains events after the request timestamp."""

    def __init__(self, message: str, offending: list | None = None):
        super().__init__(message)
        self.offending = offending or []
