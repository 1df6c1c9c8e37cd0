"""Versioned late materialization for long user-interaction histories."""

from seqstore.errors import (
    ConfigError,
    CoverageGapError,
    DuplicateEventError,
    EncodingError,
    FutureLeakageError,
    MonotonicityError,
    O2OViolationError,
    ScrubDivergenceError,
    StaleGenerationError,
)
from seqstore.model import (
    Event,
    FeatureGroup,
    TenantSpec,
    TrainingExample,
    VersionMetadata,
    WorkloadSpec,
    canonical_sort,
    compute_checksum,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CoverageGapError",
    "DuplicateEventError",
    "EncodingError",
    "Event",
    "FeatureGroup",
    "FutureLeakageError",
    "MonotonicityError",
    "O2OViolationError",
    "ScrubDivergenceError",
    "StaleGenerationError",
    "TenantSpec",
    "TrainingExample",
    "VersionMetadata",
    "WorkloadSpec",
    "canonical_sort",
    "compute_checksum",
]
