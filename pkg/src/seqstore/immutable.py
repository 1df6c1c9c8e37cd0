"""Single-level, columnar, read-optimized store for long-term history.

A compaction run rebuilds the full lookback window from the source log and
emits one :class:`Generation`: pre-sorted stripe files (one per shard) plus a
manifest. Generations are published atomically; readers pin the generation
they started with.

Stripe file layout (little-endian)::

    file    := "UIHS" version:u16 stripe_capacity:u32 stripe*
    stripe  := user_id:u64 group:str16 subsequence_ts:u64 event_count:u32
               min_ts:u64 max_ts:u64 column_count:u16 column*
    column  := name:str16 encoding:u8 payload_len:u32 payload
    str16   := len:u16 utf8-bytes
"""

from __future__ import annotations

import bisect
import contextlib
import json
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from seqstore.encoding import EncodedColumn, Encoding, decode_payload, encode_column
from seqstore.errors import ConfigError, MonotonicityError, StaleGenerationError
from seqstore.metrics import IoLedger
from seqstore.model import (
    CORE_COLUMNS,
    KEY_COLUMNS,
    MS_PER_DAY,
    Event,
    FeatureGroup,
    dumps,
    shard_of,
    validate_groups,
)

log = logging.getLogger(__name__)

MAGIC = b"UIHS"
FORMAT_VERSION = 1
DEFAULT_STRIPE_CAPACITY = 128

_FILE_HEADER = struct.Struct("<4sHI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_COUNTS = struct.Struct("<IQQH")  # event_count, min_ts, max_ts, column_count
_COL_TAIL = struct.Struct("<BI")  # encoding, payload_len


@dataclass(frozen=True, order=True)
class StripeKey:
    user_id: int
    feature_group: str
    subsequence_timestamp: int


@dataclass(frozen=True)
class DeletionList:
    item_ids: frozenset[int] = frozenset()
    user_ids: frozenset[int] = frozenset()

    def scrubs(self, event: Event) -> bool:
        return event.user_id in self.user_ids or event.item_id in self.item_ids

    def __bool__(self) -> bool:
        return bool(self.item_ids or self.user_ids)

    def to_dict(self) -> dict[str, list[int]]:
        return {"item_ids": sorted(self.item_ids), "user_ids": sorted(self.user_ids)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | Sequence[int] | None) -> DeletionList:
        if d is None:
            return cls()
        if isinstance(d, Mapping):
            return cls(frozenset(int(x) for x in d.get("item_ids", ())), frozenset(int(x) for x in d.get("user_ids", ())))
        # a bare list is read as item ids
        return cls(item_ids=frozenset(int(x) for x in d))


@dataclass(frozen=True)
class Stripe:
    key: StripeKey
    event_count: int
    min_ts: int
    max_ts: int
    columns: tuple[EncodedColumn, ...]

    @classmethod
    def from_events(cls, key: StripeKey, events: Sequence[Event]) -> Stripe:
        trait_names = sorted({name for e in events for name in e.traits})
        columns = [
            encode_column("timestamp", [e.timestamp for e in events]),
            encode_column("event_id", [e.event_id for e in events]),
            encode_column("item_id", [e.item_id for e in events]),
            encode_column("event_type", [e.event_type for e in events]),
        ]
        for name in trait_names:
            if name in CORE_COLUMNS:
                raise ConfigError(f"trait name {name!r} collides with a core column", "traits")
            columns.append(encode_column(name, [e.traits.get(name) for e in events]))
        return cls(key, len(events), events[0].timestamp, events[-1].timestamp, tuple(columns))

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += _U64.pack(self.key.user_id)
        _write_str16(out, self.key.feature_group)
        out += _U64.pack(self.key.subsequence_timestamp)
        out += _COUNTS.pack(self.event_count, self.min_ts, self.max_ts, len(self.columns))
        for col in self.columns:
            _write_str16(out, col.trait_name)
            out += _COL_TAIL.pack(col.encoding, len(col.payload))
            out += col.payload
        return bytes(out)


def _write_str16(out: bytearray, s: str) -> None:
    raw = s.encode()
    out += _U16.pack(len(raw))
    out += raw


def _read_str16(buf: memoryview, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, pos)
    return bytes(buf[pos + 2 : pos + 2 + n]).decode(), pos + 2 + n


@dataclass
class StripeView:
    """A parsed stripe: header fields plus a column directory into the file."""

    key: StripeKey
    event_count: int
    min_ts: int
    max_ts: int
    header_bytes: int
    directory_bytes: int
    columns: dict[str, tuple[Encoding, memoryview]]
    _decoded: dict[str, list[object]] = field(default_factory=dict)

    def column(self, name: str) -> list[object]:
        values = self._decoded.get(name)
        if values is None:
            encoding, payload = self.columns[name]
            values = decode_payload(encoding, payload, self.event_count)
            self._decoded[name] = values
        return values

    def payload_size(self, name: str) -> int:
        return len(self.columns[name][1])


def parse_stripe(buf: memoryview, offset: int) -> StripeView:
    pos = offset
    (user_id,) = _U64.unpack_from(buf, pos)
    group, pos = _read_str16(buf, pos + 8)
    (sub_ts,) = _U64.unpack_from(buf, pos)
    count, min_ts, max_ts, ncols = _COUNTS.unpack_from(buf, pos + 8)
    pos += 8 + _COUNTS.size
    header_bytes = pos - offset
    directory = 0
    columns: dict[str, tuple[Encoding, memoryview]] = {}
    for _ in range(ncols):
        start = pos
        name, pos = _read_str16(buf, pos)
        tag, length = _COL_TAIL.unpack_from(buf, pos)
        pos += _COL_TAIL.size
        directory += pos - start
        columns[name] = (Encoding(tag), buf[pos : pos + length])
        pos += length
    return StripeView(StripeKey(user_id, group, sub_ts), count, min_ts, max_ts, header_bytes, directory, columns)


@dataclass(frozen=True)
class ManifestEntry:
    key: StripeKey
    file: str
    offset: int
    length: int
    shard: int
    event_count: int
    min_ts: int
    max_ts: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.key.user_id,
            "feature_group": self.key.feature_group,
            "subsequence_timestamp": self.key.subsequence_timestamp,
            "file": self.file,
            "offset": self.offset,
            "length": self.length,
            "shard": self.shard,
            "event_count": self.event_count,
            "min_ts": self.min_ts,
            "max_ts": self.max_ts,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ManifestEntry:
        key = StripeKey(int(d["user_id"]), d["feature_group"], int(d["subsequence_timestamp"]))
        return cls(key, d["file"], int(d["offset"]), int(d["length"]), int(d["shard"]),
                   int(d["event_count"]), int(d["min_ts"]), int(d["max_ts"]))


class Generation:
    """One immutable compaction output. Never mutated after construction."""

    def __init__(
        self,
        generation_id: int,
        as_of_ts: int,
        stripe_capacity: int,
        shard_count: int,
        feature_groups: Sequence[FeatureGroup],
        files: Mapping[str, bytes],
        manifest: Sequence[ManifestEntry],
        created_at: int | None = None,
        scrubbed_events: int = 0,
        deletions: DeletionList | None = None,
    ):
        self.generation_id = generation_id
        self.as_of_ts = as_of_ts
        self.created_at = as_of_ts if created_at is None else created_at
        self.stripe_capacity = stripe_capacity
        self.shard_count = shard_count
        self.feature_groups = tuple(feature_groups)
        self.files = dict(files)
        self.manifest = tuple(manifest)
        self.scrubbed_events = scrubbed_events
        self.deletions = deletions or DeletionList()
        self._buffers = {name: memoryview(data) for name, data in self.files.items()}
        self._views: dict[int, StripeView] = {}
        self.index: dict[tuple[int, str], tuple[int, int]] = {}
        for i, entry in enumerate(self.manifest):
            k = (entry.key.user_id, entry.key.feature_group)
            lo, _ = self.index.get(k, (i, i))
            self.index[k] = (lo, i + 1)
        self._min_ts = [e.min_ts for e in self.manifest]
        self._max_ts = [e.max_ts for e in self.manifest]

    def __repr__(self) -> str:
        return f"Generation(id={self.generation_id}, as_of={self.as_of_ts}, stripes={len(self.manifest)})"

    @property
    def total_bytes(self) -> int:
        return sum(len(b) for b in self.files.values())

    @property
    def group_names(self) -> list[str]:
        return sorted(g.name for g in self.feature_groups)

    def stripe(self, index: int) -> StripeView:
        view = self._views.get(index)
        if view is None:
            entry = self.manifest[index]
            view = parse_stripe(self._buffers[entry.file], entry.offset)
            self._views[index] = view
        return view

    def stripe_range(self, user_id: int, feature_group: str) -> tuple[int, int]:
        return self.index.get((user_id, feature_group), (0, 0))

    def overlapping(self, user_id: int, feature_group: str, start_ts: int, end_ts: int) -> range:
        """Manifest indices of the user's group stripes that intersect the window."""
        lo, hi = self.stripe_range(user_id, feature_group)
        if lo == hi or start_ts > end_ts:
            return range(0)
        first = bisect.bisect_left(self._max_ts, start_ts, lo, hi)
        last = bisect.bisect_right(self._min_ts, end_ts, lo, hi)
        return range(first, max(first, last))

    def iter_events(self) -> Iterator[Event]:
        """Fully decode every stripe in physical order."""
        for i in range(len(self.manifest)):
            yield from _materialize(self.stripe(i), None)

    def events_for(self, user_id: int, feature_group: str) -> list[Event]:
        lo, hi = self.stripe_range(user_id, feature_group)
        out: list[Event] = []
        for i in range(lo, hi):
            out.extend(_materialize(self.stripe(i), None))
        return out

    def manifest_dict(self) -> dict[str, Any]:
        return {
            "generation_id": self.generation_id,
            "as_of_ts": self.as_of_ts,
            "created_at": self.created_at,
            "stripe_capacity": self.stripe_capacity,
            "shard_count": self.shard_count,
            "feature_groups": [g.to_dict() for g in self.feature_groups],
            "scrubbed_events": self.scrubbed_events,
            "deletions": self.deletions.to_dict(),
            "stripes": [e.to_dict() for e in self.manifest],
        }

    def write(self, directory: str | os.PathLike) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name, data in sorted(self.files.items()):
            (out / name).write_bytes(data)
        (out / "manifest.json").write_text(json.dumps(self.manifest_dict(), indent=1, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, directory: str | os.PathLike) -> Generation:
        src = Path(directory)
        m = json.loads((src / "manifest.json").read_text())
        manifest = [ManifestEntry.from_dict(e) for e in m["stripes"]]
        files = {}
        for name in sorted({e.file for e in manifest} | {p.name for p in src.glob("*.uihs")}):
            data = (src / name).read_bytes()
            magic, version, capacity = _FILE_HEADER.unpack_from(data, 0)
            if magic != MAGIC or version != FORMAT_VERSION:
                raise ConfigError(f"{src / name}: not a version-{FORMAT_VERSION} stripe file", "file")
            files[name] = data
        return cls(
            generation_id=m["generation_id"],
            as_of_ts=m["as_of_ts"],
            created_at=m["created_at"],
            stripe_capacity=m["stripe_capacity"],
            shard_count=m["shard_count"],
            feature_groups=[FeatureGroup.from_dict(g) for g in m["feature_groups"]],
            files=files,
            manifest=manifest,
            scrubbed_events=m.get("scrubbed_events", 0),
            deletions=DeletionList.from_dict(m.get("deletions")),
        )


def shard_file_name(shard: int) -> str:
    return f"shard-{shard:05d}.uihs"


def build_generation(
    sequences: Mapping[tuple[int, str], Sequence[Event]],
    *,
    generation_id: int,
    as_of_ts: int,
    feature_groups: Sequence[FeatureGroup],
    stripe_capacity: int = DEFAULT_STRIPE_CAPACITY,
    shard_count: int = 1,
    created_at: int | None = None,
    scrubbed_events: int = 0,
    deletions: DeletionList | None = None,
) -> Generation:
    """Lay out already-sorted per-(user, group) sequences as stripe files."""
    if stripe_capacity < 1:
        raise ConfigError("stripe_capacity must be >= 1", "stripe_capacity")
    if shard_count < 1:
        raise ConfigError("shard_count must be >= 1", "shard_count")
    per_shard: dict[int, list[tuple[int, str]]] = {}
    for user_id, group in sequences:
        per_shard.setdefault(shard_of(user_id, shard_count), []).append((user_id, group))
    files: dict[str, bytes] = {}
    manifest: list[ManifestEntry] = []
    for shard in sorted(per_shard):
        name = shard_file_name(shard)
        buf = bytearray(_FILE_HEADER.pack(MAGIC, FORMAT_VERSION, stripe_capacity))
        for user_id, group in sorted(per_shard[shard]):
            events = sequences[(user_id, group)]
            for start in range(0, len(events), stripe_capacity):
                chunk = events[start : start + stripe_capacity]
                key = StripeKey(user_id, group, chunk[0].timestamp)
                raw = Stripe.from_events(key, chunk).to_bytes()
                manifest.append(ManifestEntry(key, name, len(buf), len(raw), shard, len(chunk),
                                              chunk[0].timestamp, chunk[-1].timestamp))
                buf += raw
        files[name] = bytes(buf)
    return Generation(generation_id, as_of_ts, stripe_capacity, shard_count, feature_groups, files, manifest,
                      created_at=created_at, scrubbed_events=scrubbed_events, deletions=deletions)


def compact(
    source_events: Iterable[Event],
    feature_groups: Sequence[FeatureGroup],
    deletion_list: DeletionList | None,
    as_of_ts: int,
    *,
    generation_id: int = 1,
    stripe_capacity: int = DEFAULT_STRIPE_CAPACITY,
    shard_count: int = 1,
    created_at: int | None = None,
) -> Generation:
    """Rebuild every user's lookback window from the source-of-truth log.

    Keeps events with ``timestamp <= as_of_ts`` inside their group's
    lookback, drops anything matched by ``deletion_list`` and silently
    deduplicates repeated (user, timestamp, event_id) keeping the first.
    Identical inputs produce byte-identical files.
    """
    by_type = validate_groups(feature_groups)
    deletions = deletion_list or DeletionList()
    floors = {g.name: as_of_ts - g.lookback_days * MS_PER_DAY for g in feature_groups}
    buckets: dict[tuple[int, str], dict[tuple[int, int], Event]] = {}
    scrubbed = 0
    for e in source_events:
        if e.timestamp > as_of_ts:
            continue
        group = by_type.get(e.event_type)  # type: ignore[arg-type]
        if group is None:
            raise ConfigError(f"event {e.event_id} of user {e.user_id} has unknown type {e.event_type!r}", "event_type")
        if e.timestamp <= floors[group.name]:
            continue
        if deletions and deletions.scrubs(e):
            scrubbed += 1
            continue
        bucket = buckets.setdefault((e.user_id, group.name), {})
        bucket.setdefault((e.timestamp, e.event_id), e)
    sequences = {k: [b[sk] for sk in sorted(b)] for k, b in buckets.items()}
    gen = build_generation(
        sequences,
        generation_id=generation_id,
        as_of_ts=as_of_ts,
        feature_groups=feature_groups,
        stripe_capacity=stripe_capacity,
        shard_count=shard_count,
        created_at=created_at,
        scrubbed_events=scrubbed,
        deletions=deletions,
    )
    log.info("compacted generation %d: %d stripes, %d bytes, %d scrubbed",
             generation_id, len(gen.manifest), gen.total_bytes, scrubbed)
    return gen


def _materialize(view: StripeView, required: frozenset[str] | None) -> list[Event]:
    """Build events from a stripe; ``required=None`` decodes every column."""
    names = list(view.columns) if required is None else [
        n for n in view.columns if n in required and n not in KEY_COLUMNS
    ]
    ts = view.column("timestamp")
    ids = view.column("event_id")
    items = view.column("item_id") if "item_id" in names else None
    types = view.column("event_type") if "event_type" in names else None
    traits = [(n, view.column(n)) for n in names if n not in CORE_COLUMNS]
    user_id = view.key.user_id
    out = []
    for i in range(view.event_count):
        t = {}
        for n, col in traits:
            v = col[i]
            if v is not None:
                t[n] = v
        out.append(Event(user_id, ids[i], ts[i], items[i] if items else None, types[i] if types else None, t))
    return out


@dataclass
class ScanResult:
    events: list[Event]
    stripes: list[int]
    bytes_read: int
    generation_id: int

    @property
    def stripes_read(self) -> int:
        return len(self.stripes)


def _stripe_read_bytes(view: StripeView, required: frozenset[str]) -> int:
    cols = set(KEY_COLUMNS) | (required & set(view.columns))
    return view.header_bytes + view.directory_bytes + sum(view.payload_size(c) for c in cols)


def multi_range_scan(
    generation: Generation,
    user_id: int,
    feature_group: str,
    start_ts: int,
    end_ts: int,
    max_events: int | None,
    required_traits: Iterable[str],
    *,
    fanout: int = 1,
) -> ScanResult:
    """Tail-biased bounded range scan with projection pushdown.

    Returns the most recent ``max_events`` events (``None`` = unbounded) of
    the user's group history inside ``[start_ts, end_ts]``. Stripes are read
    newest-first only until enough in-window events are found, and only the
    key columns plus ``required_traits`` are decoded and counted.
    """
    if start_ts > end_ts:
        raise ValueError(f"start_ts {start_ts} > end_ts {end_ts}")
    required = frozenset(required_traits)
    candidates = generation.overlapping(user_id, feature_group, start_ts, end_ts)
    limit = float("inf") if max_events is None else max_events
    picked: list[int] = []
    found = 0
    for i in reversed(candidates):
        if found >= limit:
            break
        entry = generation.manifest[i]
        if start_ts <= entry.min_ts and entry.max_ts <= end_ts:
            found += entry.event_count
        else:
            ts = generation.stripe(i).column("timestamp")
            found += sum(1 for t in ts if start_ts <= t <= end_ts)  # type: ignore[operator]
        picked.append(i)
    picked.reverse()

    def load(i: int) -> tuple[list[Event], int]:
        view = generation.stripe(i)
        return _materialize(view, required), _stripe_read_bytes(view, required)

    if fanout > 1 and len(picked) > 1:
        with ThreadPoolExecutor(max_workers=fanout) as pool:
            parts = list(pool.map(load, picked))
    else:
        parts = [load(i) for i in picked]
    events = [e for evs, _ in parts for e in evs if start_ts <= e.timestamp <= end_ts]
    if max_events is not None:
        events = events[max(0, len(events) - max_events) :] if max_events else []
    return ScanResult(events, picked, sum(b for _, b in parts), generation.generation_id)


def is_contiguous(generation: Generation, stripes: Sequence[int]) -> bool:
    """True when the stripes form one run of adjacent bytes in a single file."""
    if not stripes:
        return True
    entries = [generation.manifest[i] for i in stripes]
    if len({e.file for e in entries}) != 1:
        return False
    return all(b == a + 1 for a, b in zip(stripes, stripes[1:])) and all(
        x.offset + x.length == y.offset for x, y in zip(entries, entries[1:])
    )


class ImmutableStore:
    """Holds published generations and serves pinned scans.

    ``keep_generations`` bounds how many recent generations stay retained
    once unpinned (``None`` keeps all). Publishing is the only mutation and
    is atomic with respect to readers.
    """

    def __init__(self, keep_generations: int | None = 2, ledger: IoLedger | None = None, fanout: int = 1):
        self.keep_generations = keep_generations
        self.ledger = ledger if ledger is not None else IoLedger()
        self.fanout = fanout
        self._lock = threading.Lock()
        self._generations: dict[int, Generation] = {}
        self._pins: dict[int, int] = {}
        self._live: Generation | None = None

    @property
    def live(self) -> Generation | None:
        return self._live

    @property
    def retained_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._generations)

    def publish(self, generation: Generation) -> None:
        with self._lock:
            if self._live is not None and generation.generation_id <= self._live.generation_id:
                raise MonotonicityError(
                    f"cannot publish generation {generation.generation_id}; live is {self._live.generation_id}"
                )
            self._generations[generation.generation_id] = generation
            self._live = generation
            self._reclaim()
        log.info("published generation %d (as_of=%d)", generation.generation_id, generation.as_of_ts)

    def _reclaim(self) -> None:
        if self.keep_generations is None:
            return
        keep = set(sorted(self._generations)[-self.keep_generations :])
        for gid in list(self._generations):
            if gid not in keep and not self._pins.get(gid):
                del self._generations[gid]
                log.debug("reclaimed generation %d", gid)

    def get(self, generation_id: int | None = None) -> Generation:
        with self._lock:
            return self._get_locked(generation_id)

    def _get_locked(self, generation_id: int | None) -> Generation:
        if generation_id is None:
            if self._live is None:
                raise StaleGenerationError("no generation has been published")
            return self._live
        gen = self._generations.get(generation_id)
        if gen is None:
            live = None if self._live is None else self._live.generation_id
            raise StaleGenerationError(f"generation {generation_id} is not retained (live: {live})")
        return gen

    @contextlib.contextmanager
    def pin(self, generation_id: int | None = None) -> Iterator[Generation]:
        """Hold a generation so a concurrent publish cannot reclaim it."""
        with self._lock:
            gen = self._get_locked(generation_id)
            self._pins[gen.generation_id] = self._pins.get(gen.generation_id, 0) + 1
        try:
            yield gen
        finally:
            with self._lock:
                self._pins[gen.generation_id] -= 1
                if not self._pins[gen.generation_id]:
                    del self._pins[gen.generation_id]
                self._reclaim()

    def scan(
        self,
        user_id: int,
        feature_group: str,
        start_ts: int,
        end_ts: int,
        max_events: int | None,
        required_traits: Iterable[str],
        generation_id: int | None = None,
    ) -> ScanResult:
        with self.pin(generation_id) as gen:
            result = multi_range_scan(gen, user_id, feature_group, start_ts, end_ts, max_events,
                                      required_traits, fanout=self.fanout)
        self.ledger.add("lookup_read_bytes", result.bytes_read)
        return result

    def multi_scan(
        self,
        ranges: Sequence[tuple[int, str, int, int, int | None]],
        required_traits: Iterable[str],
        generation_id: int | None = None,
    ) -> list[ScanResult]:
        """One bulk request: several (user, group, start, end, max_events) ranges."""
        required = frozenset(required_traits)
        with self.pin(generation_id) as gen:
            results = [
                multi_range_scan(gen, u, g, s, e, n, required, fanout=self.fanout) for u, g, s, e, n in ranges
            ]
        self.ledger.add("lookup_read_bytes", sum(r.bytes_read for r in results))
        return results


def manifest_json(generation: Generation) -> str:
    return dumps(generation.manifest_dict())
