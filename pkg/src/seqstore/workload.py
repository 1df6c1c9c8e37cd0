"""Seeded synthetic users, events, ranking requests and labels."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import numpy as np

from seqstore.model import EVENT_TYPES, MS_PER_DAY, MS_PER_HOUR, Event, WorkloadSpec, dumps
from seqstore.protocol import RankingRequest

EVENT_TYPE_WEIGHTS = (0.55, 0.12, 0.05, 0.05, 0.23)  # aligned with EVENT_TYPES
SHARE_TARGETS = ("friend", "story", "group", "reel", "external")


@dataclass(frozen=True)
class Label:
    request_id: int
    user_id: int
    label_ts: int
    labels: Mapping[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {"request_id": self.request_id, "user_id": self.user_id, "label_ts": self.label_ts,
                "labels": dict(self.labels)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Label:
        return cls(int(d["request_id"]), int(d["user_id"]), int(d["label_ts"]), dict(d["labels"]))


@dataclass
class Workload:
    spec: WorkloadSpec
    events: list[Event]
    requests: list[RankingRequest]
    labels: list[Label]

    def label_for(self) -> dict[int, Label]:
        return {lb.request_id: lb for lb in self.labels}

    def scalar_features(self, request_id: int) -> bytes:
        return scalar_features(self.spec, request_id)


def scalar_features(spec: WorkloadSpec, request_id: int) -> bytes:
    """Opaque non-sequence feature bytes, derived from (seed, request_id)."""
    return np.random.default_rng([spec.rng_seed, request_id]).bytes(spec.scalar_feature_bytes)


def _f32(x: float) -> float:
    return float(np.float32(x))


def _traits(rng: np.random.Generator, event_type: str) -> dict[str, Any]:
    if event_type == "video_watch":
        return {"watch_time_ms": int(rng.integers(500, 600_000))}
    if event_type == "comment":
        return {"comment_text_len": int(rng.integers(1, 500))}
    if event_type == "share":
        return {"share_target": SHARE_TARGETS[int(rng.integers(len(SHARE_TARGETS)))]}
    if event_type == "view" and rng.random() < 0.3:
        return {"dwell_ratio": _f32(rng.random())}
    return {}


def generate_workload(spec: WorkloadSpec) -> Workload:
    """Deterministic in ``spec.rng_seed``.

    Per user-day the event count is Poisson around the configured mean at
    second-granularity timestamps; every request day gets exactly K requests
    per user and each request one label, some arriving more than a day later.
    """
    rng = np.random.default_rng(spec.rng_seed)
    events: list[Event] = []
    raw_requests: list[tuple[int, int]] = []
    probs = np.asarray(EVENT_TYPE_WEIGHTS)
    for u in range(spec.num_users):
        user_id = u + 1
        counts = rng.poisson(spec.events_per_user_per_day, spec.days)
        event_id = 0
        for day, n in enumerate(counts):
            base = spec.day_start(day)
            secs = np.sort(rng.integers(0, 86_400, int(n)))
            types = rng.choice(len(EVENT_TYPES), size=int(n), p=probs)
            items = rng.integers(1, 1 << 40, int(n))
            for s, t, item in zip(secs, types, items):
                event_id += 1
                etype = EVENT_TYPES[int(t)]
                events.append(Event(user_id, event_id, base + int(s) * 1000, int(item), etype, _traits(rng, etype)))
        for day in range(spec.first_request_day, spec.days):
            base = spec.day_start(day)
            k = spec.requests_per_user_per_day
            if spec.requests_same_hour:
                hour = int(rng.integers(0, 24))
                offsets = hour * MS_PER_HOUR + rng.integers(1, MS_PER_HOUR, k)
            else:
                offsets = rng.integers(1, MS_PER_DAY, k)
            raw_requests.extend((base + int(o), user_id) for o in np.sort(offsets))
    events.sort(key=lambda e: (e.timestamp, e.user_id, e.event_id))
    raw_requests.sort()
    requests = [RankingRequest(user_id, ts, i + 1) for i, (ts, user_id) in enumerate(raw_requests)]
    labels = []
    for r in requests:
        if rng.random() < 0.1:
            delay = int(rng.integers(MS_PER_HOUR, 36 * MS_PER_HOUR))  # crosses the next compaction
        else:
            delay = 1 + int(rng.exponential(30 * 60_000))
        click = float(rng.random() < 0.2)
        labels.append(Label(r.request_id, r.user_id, r.request_ts + delay,
                            {"click": click, "watch_time_s": _f32(rng.exponential(20.0))}))
    return Workload(spec, events, requests, labels)


def mean_event_bytes(events: Iterable[Event]) -> float:
    """Mean serialized size of one event inside a JSON list (separator included)."""
    total = n = 0
    for e in events:
        total += len(e.to_json().encode()) + 1
        n += 1
    return total / n if n else 0.0


def write_jsonl(path: str | os.PathLike, rows: Iterable[Mapping[str, Any]]) -> int:
    n = 0
    with open(path, "w") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
            n += 1
    return n


def read_jsonl(path: str | os.PathLike) -> Iterator[dict[str, Any]]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def request_to_dict(r: RankingRequest) -> dict[str, int]:
    return {"request_id": r.request_id, "user_id": r.user_id, "request_ts": r.request_ts}


def request_from_dict(d: Mapping[str, Any]) -> RankingRequest:
    return RankingRequest(int(d["user_id"]), int(d["request_ts"]), int(d["request_id"]))


def write_workload(workload: Workload, directory: str | os.PathLike) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "workload.json").write_text(json.dumps(workload.spec.to_dict(), indent=1, sort_keys=True) + "\n")
    write_jsonl(out / "events.jsonl", (e.to_dict() for e in workload.events))
    write_jsonl(out / "requests.jsonl", (request_to_dict(r) for r in workload.requests))
    write_jsonl(out / "labels.jsonl", (lb.to_dict() for lb in workload.labels))
    return out


def read_events(path: str | os.PathLike) -> list[Event]:
    return [Event.from_dict(d) for d in read_jsonl(path)]
