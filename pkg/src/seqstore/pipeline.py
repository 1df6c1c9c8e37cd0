"""Disaggregated preprocessing: index join, prefetching, rebatching, affinity.

Time is simulated. Each base batch has a probe-side read cost and a lookup
cost from :class:`LatencyModel`; the prefetch schedule is computed from
those costs, so the overlap claim is an exact, repeatable number. Outputs
never depend on the schedule.
"""

from __future__ import annotations

import math
import queue
import random
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

from seqstore.errors import ConfigError, ReconstructionError, StaleGenerationError
from seqstore.fatrow import project_fat_row
from seqstore.immutable import ImmutableStore
from seqstore.model import MS_PER_HOUR, Event, TenantSpec, TrainingExample, dumps, shard_of
from seqstore.protocol import assemble, plan_reconstruction, reconstruct

MODES = ("streaming", "batch")


@dataclass(frozen=True)
class ShardMap:
    shard_count: int

    def __post_init__(self) -> None:
        if self.shard_count < 1:
            raise ConfigError("shard_count must be >= 1", "shard_count")

    def shard(self, user_id: int) -> int:
        return shard_of(user_id, self.shard_count)


@dataclass(frozen=True)
class LatencyModel:
    primary_read_ms: float = 10.0
    primary_per_kib_ms: float = 0.0
    lookup_base_ms: float = 10.0
    lookup_per_stripe_ms: float = 0.0
    decode_per_event_us: float = 0.0
    gpu_batch_time_ms: float = 0.0

    def __post_init__(self) -> None:
        for name, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"latency.{name} must be nonnegative", name)

    def primary(self, nbytes: int) -> float:
        return self.primary_read_ms + self.primary_per_kib_ms * nbytes / 1024

    def lookup(self, calls: int, stripes: int, events: int) -> float:
        if not calls:
            return 0.0
        return self.lookup_base_ms + self.lookup_per_stripe_ms * stripes + self.decode_per_event_us * events / 1000

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LatencyModel:
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"latency has unknown field {sorted(extra)[0]!r}", sorted(extra)[0])
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class MaterializedExample:
    example_id: int
    user_id: int
    request_ts: int
    labels: Mapping[str, float]
    sequence: tuple[Event, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "user_id": self.user_id,
            "request_ts": self.request_ts,
            "labels": dict(self.labels),
            "sequence": [e.to_dict() for e in self.sequence],
        }


@dataclass
class MaterializedBatch:
    index: int
    examples: list[MaterializedExample]

    def to_json(self) -> str:
        return dumps({"index": self.index, "examples": [x.to_dict() for x in self.examples]})


@dataclass
class PipelineStats:
    batches: int = 0
    examples: int = 0
    dropped_examples: int = 0
    stripes_read: int = 0
    primary_read_bytes: int = 0
    lookup_read_bytes: int = 0
    lookup_calls: int = 0
    lookups_saved: int = 0
    fanout_total: int = 0
    fanout_max: int = 0
    simulated_ms: float = 0.0
    serial_ms: float = 0.0
    primary_ms: float = 0.0
    lookup_ms: float = 0.0
    gpu_starvation_pct: float = 0.0
    worker_waste_pct: float = 0.0
    batch_fanout: list[int] = field(default_factory=list)

    @property
    def mean_fanout(self) -> float:
        return self.fanout_total / self.batches if self.batches else 0.0

    @property
    def per_batch_ms(self) -> float:
        return self.simulated_ms / self.batches if self.batches else 0.0

    def merge(self, other: PipelineStats) -> PipelineStats:
        """Combine stats of runs executed back to back (times add)."""
        out = PipelineStats()
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            setattr(out, name, max(a, b) if name == "fanout_max" else a + b)
        return out

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mean_fanout"] = self.mean_fanout
        return d


def pipeline_schedule(primary_ms: Sequence[float], lookup_ms: Sequence[float], depth: int) -> float:
    """Finish time of a two-stage pipeline with a bounded prefetch buffer.

    Depth 0 runs each batch's probe read and lookup back to back. With depth
    ``d`` the probe read of batch ``i`` may start once batch ``i - d`` has
    left the buffer (its lookup started).
    """
    if depth < 0:
        raise ConfigError("prefetch_depth must be >= 0", "prefetch_depth")
    if depth == 0:
        return float(sum(primary_ms) + sum(lookup_ms))
    probe_end: list[float] = []
    lookup_start: list[float] = []
    lookup_end = 0.0
    for i, (p, l) in enumerate(zip(primary_ms, lookup_ms)):
        start = probe_end[-1] if probe_end else 0.0
        if i >= depth:
            start = max(start, lookup_start[i - depth])
        probe_end.append(start + p)
        ls = max(probe_end[-1], lookup_end)
        lookup_start.append(ls)
        lookup_end = ls + l
    return lookup_end


def chunk(examples: Iterable[TrainingExample], size: int) -> Iterator[list[TrainingExample]]:
    batch: list[TrainingExample] = []
    for x in examples:
        batch.append(x)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def bucket_by_user(examples: Iterable[TrainingExample], base_batch_size: int) -> Iterator[list[TrainingExample]]:
    """Cluster examples by user within each hourly window into base batches.

    A user's hour group is kept in one batch unless it alone exceeds the
    batch size; hours are emitted in order of first appearance.
    """
    windows: OrderedDict[int, OrderedDict[int, list[TrainingExample]]] = OrderedDict()
    for x in examples:
        users = windows.setdefault(x.request_ts // MS_PER_HOUR, OrderedDict())
        users.setdefault(x.user_id, []).append(x)
    for users in windows.values():
        batch: list[TrainingExample] = []
        for group in users.values():
            if batch and len(batch) + len(group) > base_batch_size:
                yield batch
                batch = []
            for x in group:
                batch.append(x)
                if len(batch) == base_batch_size:
                    yield batch
                    batch = []
        if batch:
            yield batch


def route_shards(batch: Sequence[TrainingExample], shard_map: ShardMap) -> dict[int, list[TrainingExample]]:
    """Split a batch's lookups into one sub-request per storage shard."""
    out: dict[int, list[TrainingExample]] = {}
    for x in batch:
        out.setdefault(shard_map.shard(x.user_id), []).append(x)
    return dict(sorted(out.items()))


def ingest(
    examples: Iterable[TrainingExample],
    shard_map: ShardMap,
    *,
    symmetric: bool = True,
) -> dict[int, list[TrainingExample]]:
    """Partition primary training data into shards.

    Symmetric ingestion reuses the storage partition key (user id);
    otherwise examples are spread by example id, as a key-agnostic writer
    would.
    """
    out: dict[int, list[TrainingExample]] = {s: [] for s in range(shard_map.shard_count)}
    for x in examples:
        out[shard_map.shard(x.user_id if symmetric else x.example_id)].append(x)
    return out


class _BatchJoin:
    """Index join of one base batch against the immutable store."""

    def __init__(self, tenant: TenantSpec, store: ImmutableStore | None, bucketed: bool, verify: str):
        self.tenant = tenant
        self.store = store
        self.bucketed = bucketed
        self.verify = verify

    def lookup_groups(self, batch: Sequence[TrainingExample]) -> list[list[TrainingExample]]:
        if not self.bucketed:
            return [[x] for x in batch]
        groups: OrderedDict[tuple, list[TrainingExample]] = OrderedDict()
        for x in batch:
            meta = x.version_metadata
            assert meta is not None
            key = (x.user_id, meta.generation_id, tuple(sorted(meta.seq_length)))
            groups.setdefault(key, []).append(x)
        return list(groups.values())

    def run(self, batch: Sequence[TrainingExample]) -> tuple[list[tuple[TrainingExample, list[Event] | Exception]], dict[str, int]]:
        counters = {"calls": 0, "saved": 0, "stripes": 0, "bytes": 0, "events": 0}
        results: dict[int, list[Event] | Exception] = {}
        for group in self.lookup_groups(batch):
            try:
                self._join_group(group, results, counters)
            except (ReconstructionError, StaleGenerationError) as exc:
                for x in group:
                    results.setdefault(x.example_id, exc)
        return [(x, results[x.example_id]) for x in batch], counters

    def _join_group(self, group: list[TrainingExample], results: dict, counters: dict[str, int]) -> None:
        assert self.store is not None
        first = group[0]
        meta0 = first.version_metadata
        assert meta0 is not None
        gen = self.store.get(meta0.generation_id)
        plans = {x.example_id: plan_reconstruction(x, self.tenant, gen.feature_groups) for x in group}
        full = {i: self.verify == "full" or all(p.full_window for p in ps) for i, ps in plans.items()}

        def need(x: TrainingExample, g: str, plan) -> int:
            return x.version_metadata.seq_length[g] if full[x.example_id] else plan.immutable_events

        ranges = []
        for g in sorted(meta0.seq_length):
            wants = [(x, next(p for p in plans[x.example_id] if p.group == g)) for x in group]
            ns = [need(x, g, p) for x, p in wants]
            if max(ns) == 0:
                continue
            metas = [x.version_metadata for x in group]
            start = min(m.start_ts for m in metas)
            end = max(m.end_ts for m in metas)
            same_end = all(m.end_ts == end for m in metas)
            ranges.append((first.user_id, g, start, end, max(ns) if same_end else None))
        if ranges:
            counters["calls"] += 1
            counters["saved"] += len(group) - 1
            scans = self.store.multi_scan(ranges, self.tenant.required_traits, generation_id=meta0.generation_id)
        else:
            scans = []
        counters["stripes"] += sum(s.stripes_read for s in scans)
        counters["bytes"] += sum(s.bytes_read for s in scans)
        counters["events"] += sum(len(s.events) for s in scans)
        shared = {r[1]: s.events for r, s in zip(ranges, scans)}
        for x in group:
            meta = x.version_metadata
            scanned = {}
            for p in plans[x.example_id]:
                window = [e for e in shared.get(p.group, ()) if meta.start_ts <= e.timestamp <= meta.end_ts]
                n = need(x, p.group, p)
                scanned[p.group] = window[max(0, len(window) - n) :] if n else []
            try:
                results[x.example_id] = assemble(x, plans[x.example_id], scanned, verify_checksum=full[x.example_id])
            except ReconstructionError as exc:
                results[x.example_id] = exc


def _probe(batches: Iterable[list[TrainingExample]], depth: int, threaded: bool) -> Iterator[list[TrainingExample]]:
    if not threaded or depth == 0:
        yield from batches
        return
    buf: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def producer() -> None:
        try:
            for b in batches:
                buf.put(b)
        finally:
            buf.put(done)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    while (item := buf.get()) is not done:
        yield item
    t.join()


def run_pipeline(
    examples: Iterable[TrainingExample],
    tenant: TenantSpec,
    mode: str,
    prefetch_depth: int,
    latency: LatencyModel,
    store: ImmutableStore | None = None,
    *,
    bucket: bool = False,
    shard_map: ShardMap | None = None,
    error_policy: str | None = None,
    verify: str = "auto",
    threaded: bool = False,
) -> tuple[list[MaterializedBatch], PipelineStats]:
    """Materialize base batches for one tenant.

    Late-materialized examples are joined against ``store``; fat rows are
    projected in place. ``error_policy`` is ``"fail-batch"`` or
    ``"drop-example-and-count"`` (default depends on mode). With
    ``threaded`` the probe stage runs on its own thread behind a bounded
    queue of ``prefetch_depth``; results are identical either way.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}", "mode")
    if prefetch_depth < 0:
        raise ConfigError("prefetch_depth must be >= 0", "prefetch_depth")
    policy = error_policy or ("fail-batch" if mode == "streaming" else "drop-example-and-count")
    if policy not in ("fail-batch", "drop-example-and-count"):
        raise ConfigError(f"unknown error policy {policy!r}", "error_policy")
    use_buckets = bucket and mode == "batch"
    batches = bucket_by_user(examples, tenant.base_batch_size) if use_buckets else chunk(examples, tenant.base_batch_size)
    joiner = _BatchJoin(tenant, store, use_buckets, verify)
    stats = PipelineStats()
    out: list[MaterializedBatch] = []
    primary_ms: list[float] = []
    lookup_ms: list[float] = []
    for batch in _probe(batches, prefetch_depth, threaded):
        nbytes = sum(x.section_sizes()["total"] for x in batch)
        stats.primary_read_bytes += nbytes
        primary_ms.append(latency.primary(nbytes))
        if shard_map is not None:
            fan = len(route_shards(batch, shard_map))
            stats.fanout_total += fan
            stats.fanout_max = max(stats.fanout_max, fan)
            stats.batch_fanout.append(fan)
        late = [x for x in batch if not x.is_fat_row]
        if late and store is None:
            raise ConfigError("late-materialized examples need an immutable store", "store")
        joined: dict[int, list[Event] | Exception] = {}
        counters = {"calls": 0, "saved": 0, "stripes": 0, "bytes": 0, "events": 0}
        if late:
            pairs, counters = joiner.run(late)
            joined = {x.example_id: r for x, r in pairs}
        lookup_ms.append(latency.lookup(counters["calls"], counters["stripes"], counters["events"]))
        stats.lookup_calls += counters["calls"]
        stats.lookups_saved += counters["saved"]
        stats.stripes_read += counters["stripes"]
        stats.lookup_read_bytes += counters["bytes"]
        materialized = []
        for x in batch:
            if x.is_fat_row:
                seq = project_fat_row(x, tenant)
            else:
                r = joined[x.example_id]
                if isinstance(r, Exception):
                    if policy == "fail-batch":
                        raise r
                    stats.dropped_examples += 1
                    continue
                seq = r
            materialized.append(MaterializedExample(x.example_id, x.user_id, x.request_ts, x.labels, tuple(seq)))
        out.append(MaterializedBatch(len(out), materialized))
        stats.batches += 1
        stats.examples += len(materialized)
    stats.primary_ms = float(sum(primary_ms))
    stats.lookup_ms = float(sum(lookup_ms))
    stats.serial_ms = pipeline_schedule(primary_ms, lookup_ms, 0)
    stats.simulated_ms = pipeline_schedule(primary_ms, lookup_ms, prefetch_depth)
    if latency.gpu_batch_time_ms > 0 and stats.batches:
        stats.gpu_starvation_pct = 100 * starvation(1, stats.per_batch_ms, latency.gpu_batch_time_ms)
        stats.worker_waste_pct = 100 * worker_waste(1, stats.per_batch_ms, latency.gpu_batch_time_ms)
    return out, stats


def run_ingested(
    ingested: Mapping[int, Sequence[TrainingExample]],
    tenant: TenantSpec,
    mode: str,
    prefetch_depth: int,
    latency: LatencyModel,
    store: ImmutableStore | None = None,
    *,
    shard_map: ShardMap | None = None,
    **kwargs: Any,
) -> tuple[list[MaterializedBatch], PipelineStats]:
    """Run one preprocessing worker per ingested shard, back to back.

    Batches never span ingested shards, so when ingestion is symmetric with
    the store's sharding every lookup stays on one storage shard.
    """
    batches: list[MaterializedBatch] = []
    total = PipelineStats()
    for shard in sorted(ingested):
        if not ingested[shard]:
            continue
        out, stats = run_pipeline(ingested[shard], tenant, mode, prefetch_depth, latency, store,
                                  shard_map=shard_map, **kwargs)
        for b in out:
            batches.append(MaterializedBatch(len(batches), b.examples))
        total = total.merge(stats)
    if latency.gpu_batch_time_ms > 0 and total.batches:
        total.gpu_starvation_pct = 100 * starvation(1, total.per_batch_ms, latency.gpu_batch_time_ms)
        total.worker_waste_pct = 100 * worker_waste(1, total.per_batch_ms, latency.gpu_batch_time_ms)
    return batches, total


def reconstruct_unbatched(examples: Iterable[TrainingExample], tenant: TenantSpec, store: ImmutableStore) -> list[list[Event]]:
    """Per-example reconstruction without any batching; the pipeline's oracle."""
    return [reconstruct(x, tenant, store) for x in examples]


def rebatch(base_batches: Iterable[MaterializedBatch], batch_size: int, seed: int = 0) -> Iterator[list[MaterializedExample]]:
    """Merge base batches into model batches, shuffling within the buffer.

    The shuffle is seeded, so the emitted permutation is reproducible. A
    final short batch is emitted when the total is not a multiple.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", "batch_size")
    rng = random.Random(seed)
    buffer: list[MaterializedExample] = []
    for b in base_batches:
        buffer.extend(b.examples)
        while len(buffer) >= batch_size:
            rng.shuffle(buffer)
            yield buffer[:batch_size]
            buffer = buffer[batch_size:]
    if buffer:
        rng.shuffle(buffer)
        yield buffer


def starvation(workers: int, prep_ms: float, gpu_ms: float) -> float:
    """Fraction of time the accelerator waits for data."""
    if prep_ms <= 0:
        return 0.0
    return max(0.0, 1.0 - workers * gpu_ms / prep_ms)


def worker_waste(workers: int, prep_ms: float, gpu_ms: float) -> float:
    """Fraction of preprocessing capacity left idle."""
    if workers * gpu_ms <= 0:
        return 0.0
    return max(0.0, 1.0 - prep_ms / (workers * gpu_ms))


@dataclass(frozen=True)
class WorkerAdvice:
    workers: int
    prep_ms: float
    starvation_now: float
    starvation_advised: float
    waste_advised: float


def advise_worker_count(stats: PipelineStats | float, gpu_batch_time_ms: float, current_workers: int = 1) -> WorkerAdvice:
    """Workers needed so preprocessing keeps up with the accelerator.

    ``stats`` may be a measured run or a per-batch preprocessing time in ms.
    """
    if gpu_batch_time_ms <= 0:
        raise ConfigError("gpu_batch_time_ms must be positive", "gpu_batch_time_ms")
    prep = stats.per_batch_ms if isinstance(stats, PipelineStats) else float(stats)
    workers = max(1, math.ceil(prep / gpu_batch_time_ms - 1e-9))
    return WorkerAdvice(
        workers=workers,
        prep_ms=prep,
        starvation_now=starvation(current_workers, prep, gpu_batch_time_ms),
        starvation_advised=starvation(workers, prep, gpu_batch_time_ms),
        waste_advised=worker_waste(workers, prep, gpu_batch_time_ms),
    )
