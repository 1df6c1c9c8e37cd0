"""Versioned late materialization: snapshot at inference, rebuild at training.

At inference the mutable tail is logged verbatim and the immutable part is
replaced by a :class:`VersionMetadata` pointer. At training time the pointer
drives a bounded tail scan against the pinned generation; the two halves are
concatenated and checked against the logged length and checksum.

Hand-off rule: the immutable window ends at ``min(as_of_ts, request_ts)`` of
the live generation, and the mutable snapshot covers everything after it up
to ``request_ts``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from seqstore.errors import (
    ConfigError,
    CoverageGapError,
    FutureLeakageError,
    O2OViolationError,
    ScrubDivergenceError,
    StaleGenerationError,
)
from seqstore.immutable import ImmutableStore, multi_range_scan
from seqstore.metrics import IoLedger
from seqstore.model import (
    MS_PER_DAY,
    Event,
    FeatureGroup,
    TenantSpec,
    TrainingExample,
    VersionMetadata,
    compute_checksum,
)
from seqstore.mutable import MutableStore


@dataclass(frozen=True)
class RankingRequest:
    user_id: int
    request_ts: int
    request_id: int


@dataclass(frozen=True)
class InferenceSnapshot:
    request: RankingRequest
    mutable_snapshot: tuple[Event, ...]
    version_metadata: VersionMetadata
    full_sequence: tuple[Event, ...]
    by_group: Mapping[str, tuple[Event, ...]]


def merge_sorted(parts: Iterable[Sequence[Event]]) -> list[Event]:
    return list(heapq.merge(*parts, key=lambda e: (e.timestamp, e.event_id)))


def group_index(groups: Sequence[FeatureGroup]) -> dict[str, FeatureGroup]:
    return {t: g for g in groups for t in g.event_types}


def split_by_group(events: Iterable[Event], groups: Sequence[FeatureGroup]) -> dict[str, list[Event]]:
    by_type = group_index(groups)
    out: dict[str, list[Event]] = {g.name: [] for g in groups}
    for e in events:
        g = by_type.get(e.event_type)  # type: ignore[arg-type]
        if g is None:
            raise ConfigError(f"event type {e.event_type!r} belongs to no feature group", "event_type")
        out[g.name].append(e)
    return out


def _tail(seq: Sequence[Event], n: int) -> list[Event]:
    return list(seq[max(0, len(seq) - n) :]) if n > 0 else []


def lookback_start(request_ts: int, group: FeatureGroup) -> int:
    return max(0, request_ts - group.lookback_days * MS_PER_DAY + 1)


def snapshot_at_inference(
    request: RankingRequest,
    tenant: TenantSpec,
    mutable: MutableStore,
    immutable: ImmutableStore,
) -> InferenceSnapshot:
    """Serve a request and capture what must be logged to replay it later.

    Per feature group the served sequence is the newest ``target`` events of
    the group's lookback ending at ``request_ts``: the mutable tail first,
    topped up from the immutable tier.
    """
    with immutable.pin() as gen:
        end_ts = min(gen.as_of_ts, request.request_ts)
        floor = mutable.retention_floor_ts
        if floor is not None and floor > end_ts:
            raise CoverageGapError(
                f"mutable tier evicted up to {floor} but generation {gen.generation_id} "
                f"only covers up to {gen.as_of_ts}: events in ({end_ts}, {floor}] are lost"
            )
        groups = sorted(gen.feature_groups, key=lambda g: g.name)
        recent = [e for e in mutable.read_merged(request.user_id, request.request_ts) if e.timestamp > end_ts]
        recent_by_group = split_by_group(recent, groups)
        logged: list[list[Event]] = []
        scanned_all: list[Event] = []
        seq_length: dict[str, int] = {}
        starts: list[int] = []
        by_group: dict[str, tuple[Event, ...]] = {}
        for g in groups:
            target = tenant.target(g.name)
            start = lookback_start(request.request_ts, g)
            mut = _tail([e for e in recent_by_group[g.name] if e.timestamp >= start], target)
            need = target - len(mut)
            scanned: list[Event] = []
            if need > 0 and start <= end_ts:
                scanned = multi_range_scan(gen, request.user_id, g.name, start, end_ts, need,
                                           tenant.required_traits).events
            seq_length[g.name] = len(scanned)
            if scanned:
                starts.append(scanned[0].timestamp)
            scanned_all.extend(scanned)
            logged.append(mut)
            by_group[g.name] = tuple(scanned + [e.project(tenant.required_traits) for e in mut])
        meta = VersionMetadata(
            start_ts=min(starts) if starts else end_ts,
            end_ts=end_ts,
            seq_length=seq_length,
            checksum=compute_checksum(scanned_all),
            generation_id=gen.generation_id,
        )
    return InferenceSnapshot(
        request=request,
        mutable_snapshot=tuple(merge_sorted(logged)),
        version_metadata=meta,
        full_sequence=tuple(merge_sorted(by_group.values())),
        by_group=by_group,
    )


def make_latemat_example(
    snapshot: InferenceSnapshot,
    *,
    example_id: int,
    label_ts: int,
    labels: Mapping[str, float],
    scalar_features: bytes,
    ledger: IoLedger | None = None,
) -> TrainingExample:
    example = TrainingExample(
        example_id=example_id,
        user_id=snapshot.request.user_id,
        request_ts=snapshot.request.request_ts,
        label_ts=label_ts,
        labels=dict(labels),
        scalar_features=scalar_features,
        mutable_snapshot=snapshot.mutable_snapshot,
        version_metadata=snapshot.version_metadata,
    )
    if ledger is not None:
        ledger.add("primary_write_bytes", example.section_sizes()["total"])
        ledger.add("metadata_bytes", snapshot.version_metadata.serialized_size())
    return example


@dataclass(frozen=True)
class GroupPlan:
    """What one feature group of one example needs from each tier."""

    group: str
    immutable_events: int  # tail length to take from the logged window
    mutable: tuple[Event, ...]  # projected mutable tail
    full_window: bool  # the tenant consumes the whole logged window


def plan_reconstruction(
    example: TrainingExample, tenant: TenantSpec, groups: Sequence[FeatureGroup]
) -> list[GroupPlan]:
    meta = example.version_metadata
    if meta is None:
        raise ConfigError("reconstruct needs a late-materialized example", "uih_payload")
    recent = split_by_group(example.mutable_snapshot, groups)
    plans = []
    for name in sorted(meta.seq_length):
        if name not in recent:
            raise ConfigError(f"metadata names unknown feature group {name!r}", "seq_length")
        target = tenant.target(name)
        mut = _tail(recent[name], target)
        logged = meta.seq_length[name]
        k = min(logged, max(0, target - len(mut)))
        plans.append(GroupPlan(name, k, tuple(e.project(tenant.required_traits) for e in mut), k == logged))
    return plans


def assemble(
    example: TrainingExample,
    plans: Sequence[GroupPlan],
    scanned: Mapping[str, Sequence[Event]],
    *,
    verify_checksum: bool,
    scrubbed_since: bool = False,
) -> list[Event]:
    """Check scanned windows against the metadata and splice in the mutable tails.

    ``scanned[g]`` must hold the whole logged window when ``verify_checksum``
    is set, otherwise at least the planned tail.
    """
    meta = example.version_metadata
    assert meta is not None
    error = ScrubDivergenceError if scrubbed_since else O2OViolationError
    parts: list[Sequence[Event]] = []
    for plan in plans:
        got = scanned.get(plan.group, ())
        expected = meta.seq_length[plan.group] if verify_checksum else plan.immutable_events
        if len(got) != expected:
            raise error(
                f"example {example.example_id} group {plan.group!r}: scan returned {len(got)} events, "
                f"metadata expects {expected}"
            )
        parts.append(_tail(got, plan.immutable_events))
        parts.append(plan.mutable)
    if verify_checksum:
        window = [e for plan in plans for e in scanned.get(plan.group, ())]
        digest = compute_checksum(window)
        if digest != meta.checksum:
            raise error(
                f"example {example.example_id}: checksum {digest:016x} != logged {meta.checksum:016x}"
            )
    return merge_sorted(parts)


def reconstruct(
    example: TrainingExample,
    tenant: TenantSpec,
    immutable: ImmutableStore,
    *,
    verify: str = "auto",
    fallback_to_live: bool = False,
) -> list[Event]:
    """Time-travel the example's history back to its inference-time state.

    ``verify="auto"`` checks the checksum whenever the tenant consumes the
    whole logged window and only lengths otherwise; ``"full"`` always reads
    the whole window so the checksum is checked. The scan is pinned to the
    logged generation; if it is gone, ``fallback_to_live`` retries against
    the live generation and reports a mismatch there as scrub divergence
    when that generation scrubbed anything.
    """
    if verify not in ("auto", "full"):
        raise ConfigError(f"unknown verify mode {verify!r}", "verify")
    meta = example.version_metadata
    if meta is None:
        raise ConfigError("reconstruct needs a late-materialized example", "uih_payload")
    generation_id: int | None = meta.generation_id
    scrubbed_since = False
    try:
        gen = immutable.get(generation_id)
    except StaleGenerationError:
        if not fallback_to_live:
            raise
        gen = immutable.get(None)
        generation_id = gen.generation_id
        scrubbed_since = bool(gen.deletions)
    plans = plan_reconstruction(example, tenant, gen.feature_groups)
    full = verify == "full" or all(p.full_window for p in plans)
    ranges = []
    for p in plans:
        n = meta.seq_length[p.group] if full else p.immutable_events
        if n > 0:
            ranges.append((example.user_id, p.group, meta.start_ts, meta.end_ts, n))
    results = immutable.multi_scan(ranges, tenant.required_traits, generation_id=generation_id) if ranges else []
    scanned = {r[1]: res.events for r, res in zip(ranges, results)}
    return assemble(example, plans, scanned, verify_checksum=full, scrubbed_since=scrubbed_since)


def assert_no_future_leakage(reconstructed: Iterable[Event], request_ts: int) -> None:
    """Raise if any event is newer than the request (``timestamp <= request_ts`` passes)."""
    offending = [e for e in reconstructed if e.timestamp > request_ts]
    if offending:
        raise FutureLeakageError(
            f"{len(offending)} event(s) after request_ts={request_ts}: "
            + ", ".join(f"(ts={e.timestamp}, id={e.event_id})" for e in offending[:5]),
            offending,
        )
