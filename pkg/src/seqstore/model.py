"""Domain types, canonical event ordering, and the window checksum.

All types here are immutable after construction and safe to share across
threads. JSON helpers produce the canonical serialized forms that every byte
counter in the package measures.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

from seqstore.errors import ConfigError, DuplicateEventError

TraitValue = Union[int, float, str]

EVENT_TYPES: tuple[str, ...] = ("view", "like", "comment", "share", "video_watch")

# Columns every stripe carries; the first two are always decoded.
KEY_COLUMNS: tuple[str, ...] = ("timestamp", "event_id")
CORE_COLUMNS: tuple[str, ...] = ("timestamp", "event_id", "item_id", "event_type")

MS_PER_DAY = 86_400_000
MS_PER_HOUR = 3_600_000
U64_MAX = (1 << 64) - 1

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

_PAIR = struct.Struct("<QQ")


def dumps(obj: Any) -> str:
    """Canonical compact JSON used for every serialized artifact."""
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


@dataclass(frozen=True, slots=True)
class Event:
    """One user interaction.

    ``item_id`` and ``event_type`` are ``None`` only on events returned by a
    projected scan that did not request those columns.
    """

    user_id: int
    event_id: int
    timestamp: int
    item_id: int | None
    event_type: str | None
    traits: Mapping[str, TraitValue] = field(default_factory=dict)

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.timestamp, self.event_id)

    def project(self, required: frozenset[str] | set[str]) -> Event:
        """Drop every column not named in ``required`` (key columns stay)."""
        if (
            ("item_id" in required or self.item_id is None)
            and ("event_type" in required or self.event_type is None)
            and all(k in required for k in self.traits)
        ):
            return self
        return Event(
            user_id=self.user_id,
            event_id=self.event_id,
            timestamp=self.timestamp,
            item_id=self.item_id if "item_id" in required else None,
            event_type=self.event_type if "event_type" in required else None,
            traits={k: v for k, v in self.traits.items() if k in required},
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "event_id": self.event_id,
            "timestamp": self.timestamp,
            "item_id": self.item_id,
            "event_type": self.event_type,
            "traits": dict(self.traits),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Event:
        try:
            return cls(
                user_id=int(d["user_id"]),
                event_id=int(d["event_id"]),
                timestamp=int(d["timestamp"]),
                item_id=None if d.get("item_id") is None else int(d["item_id"]),
                event_type=d.get("event_type"),
                traits=dict(d.get("traits") or {}),
            )
        except KeyError as exc:
            raise ConfigError(f"event is missing field {exc.args[0]!r}", field=exc.args[0]) from None

    def to_json(self) -> str:
        return dumps(self.to_dict())


def serialized_size(events: Iterable[Event]) -> int:
    """Bytes of the events as JSON Lines (one line per event, newline included)."""
    return sum(len(e.to_json().encode()) + 1 for e in events)


def compute_checksum(events: Iterable[Event]) -> int:
    """FNV-1a/64 over each event's little-endian (timestamp, event_id) pair.

    Trait and item payloads are excluded: the checksum verifies window
    identity, not encoding.
    """
    data = b"".join([_PAIR.pack(e.timestamp, e.event_id) for e in events])
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & U64_MAX
    return h


def canonical_sort(events: Iterable[Event]) -> list[Event]:
    """Sort one user's events by (timestamp, event_id), rejecting duplicates."""
    out = sorted(events, key=lambda e: (e.timestamp, e.event_id))
    for prev, cur in zip(out, out[1:]):
        if prev.user_id != cur.user_id:
            raise ValueError("canonical_sort expects events of a single user")
        if prev.timestamp == cur.timestamp and prev.event_id == cur.event_id:
            raise DuplicateEventError(
                f"user {cur.user_id} has duplicate event (ts={cur.timestamp}, id={cur.event_id})"
            )
    return out


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    event_types: frozenset[str]
    lookback_days: int

    def __post_init__(self) -> None:
        if self.lookback_days < 1:
            raise ConfigError(f"feature group {self.name!r}: lookback_days must be >= 1", "lookback_days")
        unknown = set(self.event_types) - set(EVENT_TYPES)
        if unknown:
            raise ConfigError(f"feature group {self.name!r}: unknown event types {sorted(unknown)}", "event_types")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "event_types": sorted(self.event_types), "lookback_days": self.lookback_days}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FeatureGroup:
        for key in ("name", "event_types", "lookback_days"):
            if key not in d:
                raise ConfigError(f"feature group is missing field {key!r}", key)
        return cls(d["name"], frozenset(d["event_types"]), int(d["lookback_days"]))


def validate_groups(groups: Sequence[FeatureGroup]) -> dict[str, FeatureGroup]:
    """Check that ``groups`` partition the event types; return event_type -> group."""
    by_type: dict[str, FeatureGroup] = {}
    names = set()
    for g in groups:
        if g.name in names:
            raise ConfigError(f"duplicate feature group {g.name!r}", "feature_groups")
        names.add(g.name)
        for t in g.event_types:
            if t in by_type:
                raise ConfigError(f"event type {t!r} is in groups {by_type[t].name!r} and {g.name!r}", "feature_groups")
            by_type[t] = g
    missing = set(EVENT_TYPES) - set(by_type)
    if missing:
        raise ConfigError(f"event types {sorted(missing)} belong to no feature group", "feature_groups")
    return by_type


DEFAULT_FEATURE_GROUPS: tuple[FeatureGroup, ...] = (
    FeatureGroup("dense_views", frozenset({"view", "video_watch"}), 30),
    FeatureGroup("sparse_explicit", frozenset({"like", "comment", "share"}), 90),
)


def _hex(v: int, width: int) -> str:
    return format(v, f"0{width}x")


@dataclass(frozen=True)
class VersionMetadata:
    """The pointer logged per example in place of the immutable history.

    ``start_ts``/``end_ts`` bound the window for every group; ``seq_length``
    is the realized tail length per group. Integers serialize as fixed-width
    hex so the size depends only on the group names.
    """

    start_ts: int
    end_ts: int
    seq_length: Mapping[str, int]
    checksum: int | None
    generation_id: int

    def __post_init__(self) -> None:
        if self.start_ts > self.end_ts:
            raise ValueError(f"start_ts {self.start_ts} > end_ts {self.end_ts}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "start_ts": _hex(self.start_ts, 16),
            "end_ts": _hex(self.end_ts, 16),
            "seq_length": {g: _hex(n, 8) for g, n in sorted(self.seq_length.items())},
            "checksum": None if self.checksum is None else _hex(self.checksum, 16),
            "generation_id": _hex(self.generation_id, 16),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> VersionMetadata:
        return cls(
            start_ts=int(d["start_ts"], 16),
            end_ts=int(d["end_ts"], 16),
            seq_length={g: int(n, 16) for g, n in d["seq_length"].items()},
            checksum=None if d.get("checksum") is None else int(d["checksum"], 16),
            generation_id=int(d["generation_id"], 16),
        )

    def serialized_size(self) -> int:
        return len(dumps(self.to_dict()).encode())


@dataclass(frozen=True)
class TrainingExample:
    """A logged training example in either paradigm.

    Exactly one of ``version_metadata`` (late materialization) and
    ``materialized`` (fat row: the full sequence per feature group) is set.
    """

    example_id: int
    user_id: int
    request_ts: int
    label_ts: int
    labels: Mapping[str, float]
    scalar_features: bytes
    mutable_snapshot: tuple[Event, ...]
    version_metadata: VersionMetadata | None = None
    materialized: Mapping[str, tuple[Event, ...]] | None = None

    def __post_init__(self) -> None:
        if (self.version_metadata is None) == (self.materialized is None):
            raise ValueError("exactly one of version_metadata and materialized must be set")
        if self.label_ts <= self.request_ts:
            raise ValueError("label_ts must be after request_ts")
        if any(e.timestamp > self.request_ts for e in self.mutable_snapshot):
            raise ValueError("mutable snapshot contains events after request_ts")
        if self.materialized is not None:
            for seq in self.materialized.values():
                if any(e.timestamp > self.request_ts for e in seq):
                    raise ValueError("materialized sequence contains events after request_ts")

    @property
    def is_fat_row(self) -> bool:
        return self.materialized is not None

    def uih_payload_dict(self) -> dict[str, Any]:
        if self.version_metadata is not None:
            return {"version_metadata": self.version_metadata.to_dict()}
        assert self.materialized is not None
        return {"sequence": {g: [e.to_dict() for e in seq] for g, seq in sorted(self.materialized.items())}}

    def to_dict(self) -> dict[str, Any]:
        return {
            "example_id": self.example_id,
            "user_id": self.user_id,
            "request_ts": self.request_ts,
            "label_ts": self.label_ts,
            "labels": dict(self.labels),
            "scalar_features": base64.b64encode(self.scalar_features).decode(),
            "mutable_snapshot": [e.to_dict() for e in self.mutable_snapshot],
            "uih_payload": self.uih_payload_dict(),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrainingExample:
        payload = d["uih_payload"]
        meta = materialized = None
        if "version_metadata" in payload:
            meta = VersionMetadata.from_dict(payload["version_metadata"])
        else:
            materialized = {g: tuple(Event.from_dict(e) for e in seq) for g, seq in payload["sequence"].items()}
        return cls(
            example_id=int(d["example_id"]),
            user_id=int(d["user_id"]),
            request_ts=int(d["request_ts"]),
            label_ts=int(d["label_ts"]),
            labels=dict(d["labels"]),
            scalar_features=base64.b64decode(d["scalar_features"]),
            mutable_snapshot=tuple(Event.from_dict(e) for e in d["mutable_snapshot"]),
            version_metadata=meta,
            materialized=materialized,
        )

    @classmethod
    def from_json(cls, line: str) -> TrainingExample:
        return cls.from_dict(json.loads(line))

    def section_sizes(self) -> dict[str, int]:
        """Serialized bytes of the whole line and of its UIH-bearing sections."""
        cached = self.__dict__.get("_sizes")
        if cached is None:
            mutable = len(dumps([e.to_dict() for e in self.mutable_snapshot]).encode())
            payload = len(dumps(self.uih_payload_dict()).encode())
            # the line with both sections replaced by a one-byte placeholder
            skeleton = self.to_dict() | {"mutable_snapshot": 0, "uih_payload": 0}
            total = len(dumps(skeleton).encode()) - 2 + mutable + payload + 1
            cached = {"total": total, "mutable_snapshot": mutable, "uih_payload": payload}
            object.__setattr__(self, "_sizes", cached)
        return dict(cached)


@dataclass(frozen=True)
class TenantSpec:
    tenant_name: str
    target_seq_length: Mapping[str, int]
    required_traits: frozenset[str]
    batch_size: int = 32
    base_batch_size: int = 8

    def __post_init__(self) -> None:
        if self.base_batch_size < 1 or self.batch_size < 1:
            raise ConfigError(f"tenant {self.tenant_name!r}: batch sizes must be >= 1", "batch_size")
        if self.base_batch_size > self.batch_size:
            raise ConfigError(f"tenant {self.tenant_name!r}: base_batch_size exceeds batch_size", "base_batch_size")

    def target(self, group: str) -> int:
        return int(self.target_seq_length.get(group, 0))

    def to_dict(self) -> dict[str, Any]:
        return {
            "tenant_name": self.tenant_name,
            "target_seq_length": dict(sorted(self.target_seq_length.items())),
            "required_traits": sorted(self.required_traits),
            "batch_size": self.batch_size,
            "base_batch_size": self.base_batch_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TenantSpec:
        for key in ("tenant_name", "target_seq_length", "required_traits"):
            if key not in d:
                raise ConfigError(f"tenant spec is missing field {key!r}", key)
        return cls(
            tenant_name=d["tenant_name"],
            target_seq_length={g: int(n) for g, n in d["target_seq_length"].items()},
            required_traits=frozenset(d["required_traits"]),
            batch_size=int(d.get("batch_size", 32)),
            base_batch_size=int(d.get("base_batch_size", 8)),
        )

    @classmethod
    def union(cls, tenants: Sequence[TenantSpec], name: str = "union") -> TenantSpec:
        """The logging tenant of a shared dataset: max length, all traits."""
        targets: dict[str, int] = {}
        traits: set[str] = set()
        for t in tenants:
            traits |= t.required_traits
            for g, n in t.target_seq_length.items():
                targets[g] = max(targets.get(g, 0), n)
        batch = max(t.batch_size for t in tenants)
        base = min(t.base_batch_size for t in tenants)
        return cls(name, targets, frozenset(traits), batch, base)


@dataclass(frozen=True)
class WorkloadSpec:
    """Synthetic workload parameters.

    ``request_days`` limits ranking requests to the final days of the horizon
    (``None`` means every day); earlier days only contribute history.
    ``requests_same_hour`` places each user-day's requests inside one hour.
    """

    num_users: int
    days: int
    requests_per_user_per_day: int
    events_per_user_per_day: int
    rng_seed: int
    request_days: int | None = None
    requests_same_hour: bool = False
    scalar_feature_bytes: int = 64
    start_ts: int = 1_767_225_600_000  # 2026-01-01T00:00:00Z

    def __post_init__(self) -> None:
        for name in ("num_users", "days", "requests_per_user_per_day", "events_per_user_per_day"):
            if getattr(self, name) < 1:
                raise ConfigError(f"workload.{name} must be >= 1", name)
        if self.rng_seed < 0:
            raise ConfigError("workload.rng_seed must be >= 0", "rng_seed")
        if self.request_days is not None and not 1 <= self.request_days <= self.days:
            raise ConfigError("workload.request_days must be in [1, days]", "request_days")

    @property
    def first_request_day(self) -> int:
        return self.days - (self.request_days or self.days)

    def day_start(self, day: int) -> int:
        return self.start_ts + day * MS_PER_DAY

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_users": self.num_users,
            "days": self.days,
            "requests_per_user_per_day": self.requests_per_user_per_day,
            "events_per_user_per_day": self.events_per_user_per_day,
            "rng_seed": self.rng_seed,
            "request_days": self.request_days,
            "requests_same_hour": self.requests_same_hour,
            "scalar_feature_bytes": self.scalar_feature_bytes,
            "start_ts": self.start_ts,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> WorkloadSpec:
        known = set(cls.__dataclass_fields__)
        for key in ("num_users", "days", "requests_per_user_per_day", "events_per_user_per_day", "rng_seed"):
            if key not in d:
                raise ConfigError(f"workload is missing field {key!r}", key)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"workload has unknown field {sorted(extra)[0]!r}", sorted(extra)[0])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"workload: {exc}") from None

    def fingerprint(self) -> str:
        return format(compute_bytes_fnv(dumps(self.to_dict()).encode()), "016x")


def compute_bytes_fnv(data: bytes) -> int:
    h = FNV64_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & U64_MAX
    return h


def shard_of(user_id: int, shard_count: int) -> int:
    """Shared partitioning function for training data and stripes."""
    return compute_bytes_fnv(user_id.to_bytes(8, "little")) % shard_count
