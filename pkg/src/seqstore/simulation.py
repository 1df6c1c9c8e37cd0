"""End-to-end lifecycle: stream events, compact daily, serve, log, verify.

The simulator walks simulated time from the first needed compaction to the
end of the horizon. At each day boundary (plus ``publish_delay_ms``) it
compacts the source log and publishes a generation, then evicts mutable
events the new generation covers. Events reach the mutable tier as they
happen; each ranking request is snapshotted once and logged in both
paradigms from the same snapshot.
"""

from __future__ import annotations

import bisect
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from seqstore.errors import ConfigError, FutureLeakageError, SeqStoreError
from seqstore.fatrow import fat_row_from_snapshot, project_fat_row
from seqstore.immutable import DEFAULT_STRIPE_CAPACITY, DeletionList, Generation, ImmutableStore, compact
from seqstore.metrics import IoLedger, WriteStats
from seqstore.model import (
    DEFAULT_FEATURE_GROUPS,
    MS_PER_DAY,
    MS_PER_HOUR,
    Event,
    FeatureGroup,
    TenantSpec,
    TrainingExample,
    WorkloadSpec,
    dumps,
    validate_groups,
)
from seqstore.mutable import MutableStore
from seqstore.protocol import (
    RankingRequest,
    assert_no_future_leakage,
    make_latemat_example,
    reconstruct,
    snapshot_at_inference,
)
from seqstore.workload import Workload, generate_workload, mean_event_bytes

log = logging.getLogger(__name__)

ADVERSARIAL_EVENT_ID_BASE = 1 << 40
_EMPTY_LIST_BYTES = 2  # "[]"
_METADATA_WRAPPER_BYTES = len('{"version_metadata":}')


@dataclass(frozen=True)
class SimulationConfig:
    workload: WorkloadSpec
    feature_groups: tuple[FeatureGroup, ...] = DEFAULT_FEATURE_GROUPS
    tenants: tuple[TenantSpec, ...] = ()
    stripe_capacity: int = DEFAULT_STRIPE_CAPACITY
    shard_count: int = 1
    publish_delay_ms: int = 0
    adversarial_events_per_request: int = 0
    deletions: DeletionList = field(default_factory=DeletionList)
    compact_at_train_time: bool = True

    def __post_init__(self) -> None:
        validate_groups(self.feature_groups)
        if not self.tenants:
            raise ConfigError("at least one tenant is required", "tenants")
        if not 0 <= self.publish_delay_ms < MS_PER_DAY:
            raise ConfigError("publish_delay_ms must be within one day", "publish_delay_ms")
        if self.adversarial_events_per_request < 0:
            raise ConfigError("adversarial_events_per_request must be >= 0", "adversarial_events_per_request")

    @property
    def logging_tenant(self) -> TenantSpec:
        return TenantSpec.union(self.tenants, name="logging")

    @property
    def train_ts(self) -> int:
        """When training reads the logged examples: after the horizon's last day."""
        return self.workload.day_start(self.workload.days) + self.publish_delay_ms + MS_PER_HOUR


@dataclass
class SimulationResult:
    config: SimulationConfig
    workload: Workload
    latemat: list[TrainingExample]
    fatrow: list[TrainingExample]
    truth: dict[int, tuple[Event, ...]]
    mutable: MutableStore
    immutable: ImmutableStore
    ledgers: dict[str, IoLedger]
    generations: list[Generation]
    injected: list[Event]
    source_events: list[Event]

    def write_stats(self, paradigm: str) -> WriteStats:
        groups = sorted(g.name for g in self.config.feature_groups)
        b = mean_event_bytes(self.workload.events)
        daily = [g for g in self.generations if g.as_of_ts < self.config.workload.day_start(self.config.workload.days)]
        if paradigm == "fatrow":
            examples = self.fatrow
            uih_events = sum(len(s) for x in examples for s in x.materialized.values())  # type: ignore[union-attr]
            overhead = _EMPTY_LIST_BYTES + len(dumps({"sequence": {g: [] for g in groups}}).encode())
            compacted = runs = 0
        elif paradigm == "latemat":
            examples = self.latemat
            uih_events = sum(len(x.mutable_snapshot) for x in examples)
            overhead = _EMPTY_LIST_BYTES + _METADATA_WRAPPER_BYTES
            compacted = sum(g.manifest[i].event_count for g in daily for i in range(len(g.manifest)))
            runs = len(daily)
        else:
            raise ConfigError(f"unknown paradigm {paradigm!r}", "paradigm")
        uih_bytes = 0
        for x in examples:
            sizes = x.section_sizes()
            uih_bytes += sizes["mutable_snapshot"] + sizes["uih_payload"]
        return WriteStats(
            paradigm=paradigm,
            workload_fingerprint=self.config.workload.fingerprint(),
            examples=len(examples),
            ledger=self.ledgers[paradigm].snapshot(),
            uih_events=uih_events,
            uih_bytes=uih_bytes,
            payload_overhead_bytes=overhead * len(examples),
            mean_event_bytes=b,
            compacted_events=compacted,
            compaction_runs=runs,
        )


def _adversarial_events(workload: Workload, per_request: int, horizon_end: int) -> list[Event]:
    """Events stamped strictly after each request, up to ``horizon_end``.

    The first lands 1 ms after the request; the rest are spread up to two
    days later, so some only reach storage in later (or post-horizon)
    compactions.
    """
    if per_request == 0:
        return []
    rng = np.random.default_rng([workload.spec.rng_seed, 0xADE])
    out = []
    next_id = ADVERSARIAL_EVENT_ID_BASE
    for r in workload.requests:
        for j in range(per_request):
            offset = 1 if j == 0 else int(rng.integers(2, 2 * MS_PER_DAY))
            ts = min(r.request_ts + offset, horizon_end)
            if ts <= r.request_ts:
                continue
            next_id += 1
            out.append(Event(r.user_id, next_id, ts, int(rng.integers(1, 1 << 40)), "like", {}))
    return out


def run_simulation(
    config: SimulationConfig,
    workload: Workload | None = None,
    on_request: Callable[[RankingRequest, MutableStore, ImmutableStore], None] | None = None,
) -> SimulationResult:
    """Run the lifecycle; ``on_request`` observes the stores just before each snapshot."""
    spec = config.workload
    wl = workload if workload is not None else generate_workload(spec)
    tenant = config.logging_tenant
    labels = wl.label_for()
    injected = _adversarial_events(wl, config.adversarial_events_per_request, config.train_ts)
    events = sorted(wl.events + injected, key=lambda e: (e.timestamp, e.user_id, e.event_id))
    stamps = [e.timestamp for e in events]

    infra = IoLedger()
    ledgers = {"fatrow": IoLedger(), "latemat": IoLedger(), "infra": infra}
    mutable = MutableStore(ledger=infra)
    immutable = ImmutableStore(keep_generations=None, ledger=infra)

    first_day = max(0, spec.first_request_day - (1 if config.publish_delay_ms else 0))
    # (time, priority, kind, payload); publishes precede events precede requests at equal time
    timeline: list[tuple[int, int, str, Any]] = []
    for day in range(first_day, spec.days):
        timeline.append((spec.day_start(day) + config.publish_delay_ms, 0, "publish", day))
    for r in wl.requests:
        timeline.append((r.request_ts, 2, "request", r))
    timeline.sort(key=lambda t: (t[0], t[1], getattr(t[3], "request_id", 0)))

    cursor = bisect.bisect_left(stamps, spec.day_start(first_day))
    generations: list[Generation] = []
    latemat: list[TrainingExample] = []
    fatrow: list[TrainingExample] = []
    truth: dict[int, tuple[Event, ...]] = {}

    def stream_until(ts: int) -> None:
        nonlocal cursor
        stop = bisect.bisect_right(stamps, ts, lo=cursor)
        by_user: dict[int, list[Event]] = defaultdict(list)
        for e in events[cursor:stop]:
            by_user[e.user_id].append(e)
        for user_id, evs in by_user.items():
            mutable.append(user_id, evs)
        cursor = stop

    def publish(as_of: int, counted: bool) -> None:
        gen = compact(
            events[: bisect.bisect_right(stamps, as_of)],
            config.feature_groups,
            config.deletions,
            as_of,
            generation_id=len(generations) + 1,
            stripe_capacity=config.stripe_capacity,
            shard_count=config.shard_count,
        )
        immutable.publish(gen)
        generations.append(gen)
        if counted:
            ledgers["latemat"].add("compaction_write_bytes", gen.total_bytes)
        mutable.evict_below(gen.as_of_ts)

    for ts, _, kind, payload in timeline:
        if kind == "publish":
            stream_until(ts - 1)
            publish(spec.day_start(payload) - 1, counted=True)
            continue
        stream_until(ts)
        r = payload
        lb = labels[r.request_id]
        if on_request is not None:
            on_request(r, mutable, immutable)
        snap = snapshot_at_inference(r, tenant, mutable, immutable)
        scalar = wl.scalar_features(r.request_id)
        latemat.append(make_latemat_example(snap, example_id=r.request_id, label_ts=lb.label_ts, labels=lb.labels,
                                            scalar_features=scalar, ledger=ledgers["latemat"]))
        fatrow.append(fat_row_from_snapshot(snap, example_id=r.request_id, label_ts=lb.label_ts, labels=lb.labels,
                                            scalar_features=scalar, ledger=ledgers["fatrow"]))
        truth[r.request_id] = snap.full_sequence

    stream_until(config.train_ts)
    if config.compact_at_train_time:
        publish(config.train_ts, counted=False)
    log.info("simulated %d requests, %d generations, %d injected events",
             len(latemat), len(generations), len(injected))
    return SimulationResult(config, wl, latemat, fatrow, truth, mutable, immutable, ledgers,
                            generations, injected, events)


@dataclass
class VerificationSummary:
    tenant: str
    examples: int = 0
    o2o_equal: int = 0
    fatrow_equal: int = 0
    leakage_violations: int = 0
    errors: int = 0
    error_messages: list[str] = field(default_factory=list)

    @property
    def o2o_rate(self) -> float:
        return self.o2o_equal / self.examples if self.examples else 1.0

    @property
    def passed(self) -> bool:
        return (self.o2o_equal == self.fatrow_equal == self.examples
                and self.leakage_violations == 0 and self.errors == 0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tenant": self.tenant,
            "examples": self.examples,
            "o2o_equal": self.o2o_equal,
            "fatrow_equal": self.fatrow_equal,
            "o2o_rate": self.o2o_rate,
            "leakage_violations": self.leakage_violations,
            "errors": self.errors,
            "error_messages": self.error_messages[:20],
            "passed": self.passed,
        }


def verify(
    latemat: Sequence[TrainingExample],
    fatrow: Sequence[TrainingExample],
    tenant: TenantSpec,
    immutable: ImmutableStore,
    truth: Mapping[int, Sequence[Event]] | None = None,
) -> VerificationSummary:
    """Reconstruct every late-mat example and compare with the oracles.

    ``truth`` (the sequences served at inference) applies only to the
    tenant the examples were logged with; every tenant is compared with its
    projection of the fat row.
    """
    fat_by_id = {x.example_id: x for x in fatrow}
    summary = VerificationSummary(tenant.tenant_name)
    for x in latemat:
        summary.examples += 1
        try:
            rec = reconstruct(x, tenant, immutable)
        except SeqStoreError as exc:
            summary.errors += 1
            summary.error_messages.append(f"{x.example_id}: {exc}")
            continue
        try:
            assert_no_future_leakage(rec, x.request_ts)
        except FutureLeakageError:
            summary.leakage_violations += 1
        expected = truth[x.example_id] if truth is not None else project_fat_row(fat_by_id[x.example_id], tenant)
        if list(expected) == rec:
            summary.o2o_equal += 1
        fat = fat_by_id.get(x.example_id)
        if fat is not None and project_fat_row(fat, tenant) == rec:
            summary.fatrow_equal += 1
    return summary


def examples_jsonl(examples: Iterable[TrainingExample]) -> str:
    return "".join(x.to_json() + "\n" for x in examples)
