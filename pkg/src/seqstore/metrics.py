"""Byte-exact I/O accounting and the write-amplification report."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Any, Mapping

from seqstore.errors import ConfigError

COUNTERS: tuple[str, ...] = (
    "primary_write_bytes",
    "primary_read_bytes",
    "lookup_read_bytes",
    "mutable_write_bytes",
    "compaction_write_bytes",
    "metadata_bytes",
)


class IoLedger:
    """Thread-safe monotone byte counters keyed by subsystem and direction."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._counts: dict[str, int] = dict.fromkeys(COUNTERS, 0)

    def add(self, counter: str, nbytes: int) -> None:
        if counter not in self._counts:
            raise KeyError(f"unknown ledger counter {counter!r}")
        if nbytes < 0:
            raise ValueError("ledger counters only increase")
        with self._lock:
            self._counts[counter] += nbytes

    def __getitem__(self, counter: str) -> int:
        with self._lock:
            return self._counts[counter]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def reset(self) -> None:
        """Zero every counter; only call between runs."""
        with self._lock:
            for k in self._counts:
                self._counts[k] = 0


@dataclass(frozen=True)
class WriteStats:
    """What one paradigm wrote while logging a workload.

    Byte fields come from the ledger; the event counts feed the analytic
    model that the report checks the bytes against.
    """

    paradigm: str
    workload_fingerprint: str
    examples: int
    ledger: Mapping[str, int]
    uih_events: int  # events embedded in UIH payloads (fat row) or mutable snapshots (late mat)
    uih_bytes: int  # serialized UIH-bearing sections of the examples
    payload_overhead_bytes: int  # serialized bytes of those sections when empty, summed over examples
    mean_event_bytes: float  # mean JSON bytes per event in the workload's event log
    compacted_events: int = 0
    compaction_runs: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "paradigm": self.paradigm,
            "workload_fingerprint": self.workload_fingerprint,
            "examples": self.examples,
            "ledger": dict(self.ledger),
            "uih_events": self.uih_events,
            "uih_bytes": self.uih_bytes,
            "payload_overhead_bytes": self.payload_overhead_bytes,
            "mean_event_bytes": self.mean_event_bytes,
            "compacted_events": self.compacted_events,
            "compaction_runs": self.compaction_runs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WriteStats:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def uih_write_bytes(stats: WriteStats) -> int:
    """Primary-side bytes attributable to the interaction history."""
    if stats.paradigm == "fatrow":
        return stats.uih_bytes
    # metadata is already inside uih_bytes (the payload section)
    return stats.uih_bytes + stats.ledger.get("compaction_write_bytes", 0)


def amplification_report(
    fatrow: WriteStats,
    latemat: WriteStats,
    tenant_reads: Mapping[str, Mapping[str, int]] | None = None,
    tolerance: float = 0.10,
) -> dict[str, Any]:
    """Compare measured UIH write bytes with the event-count model.

    The model predicts each paradigm's UIH bytes from event counts alone:
    ``fatrow = N*o + E_fat*b`` and ``latemat = N*o + E_mut*b + N*c + C``,
    with ``b`` the mean event size of the log, ``o`` the empty-section
    overhead, ``c`` the mean metadata size and ``C`` the compaction bytes.
    """
    if fatrow.workload_fingerprint != latemat.workload_fingerprint:
        raise ConfigError("fat-row and late-mat stats come from different workloads", "workload")
    if fatrow.paradigm != "fatrow" or latemat.paradigm != "latemat":
        raise ConfigError("expected one fatrow and one latemat stats document", "paradigm")
    if fatrow.examples != latemat.examples:
        raise ConfigError("paradigms logged different numbers of examples", "examples")
    b = fatrow.mean_event_bytes
    n = fatrow.examples
    meta = latemat.ledger.get("metadata_bytes", 0)
    compaction = latemat.ledger.get("compaction_write_bytes", 0)
    pred_fat = fatrow.payload_overhead_bytes + fatrow.uih_events * b
    pred_late = latemat.payload_overhead_bytes + latemat.uih_events * b + meta + compaction
    meas_fat = uih_write_bytes(fatrow)
    meas_late = uih_write_bytes(latemat)
    measured_ratio = meas_fat / meas_late if meas_late else math.inf
    predicted_ratio = pred_fat / pred_late if pred_late else math.inf
    rel_err = abs(measured_ratio - predicted_ratio) / predicted_ratio if predicted_ratio else 0.0
    report: dict[str, Any] = {
        "workload_fingerprint": fatrow.workload_fingerprint,
        "examples": n,
        "measured": {
            "fatrow_uih_write_bytes": meas_fat,
            "latemat_uih_write_bytes": meas_late,
            "write_ratio": measured_ratio,
            "fatrow_primary_write_bytes": fatrow.ledger.get("primary_write_bytes", 0),
            "latemat_primary_write_bytes": latemat.ledger.get("primary_write_bytes", 0),
            "compaction_write_bytes": compaction,
            "metadata_bytes": meta,
        },
        "analytic": {
            "mean_event_bytes": b,
            "mean_fatrow_events_per_example": fatrow.uih_events / n if n else 0.0,
            "mean_mutable_events_per_example": latemat.uih_events / n if n else 0.0,
            "mean_metadata_bytes": meta / n if n else 0.0,
            "compaction_bytes_per_example": compaction / n if n else 0.0,
            "fatrow_uih_write_bytes": pred_fat,
            "latemat_uih_write_bytes": pred_late,
            "write_ratio": predicted_ratio,
        },
        "event_count_ratio": (
            fatrow.uih_events / (latemat.uih_events + latemat.compacted_events)
            if latemat.uih_events + latemat.compacted_events
            else math.inf
        ),
        "relative_error": rel_err,
        "tolerance": tolerance,
        "within_tolerance": rel_err <= tolerance,
    }
    if tenant_reads:
        report["tenant_reads"] = {name: dict(v) for name, v in sorted(tenant_reads.items())}
    return report
