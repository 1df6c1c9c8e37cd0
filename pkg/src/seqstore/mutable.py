"""Real-time tier for recent history.

Appends are blind: a write never reads existing state, it just adds a new
segment. Merging, sorting and deduplication happen when a reader asks.
"""

from __future__ import annotations

import threading
from typing import Iterable, TextIO

from seqstore.metrics import IoLedger
from seqstore.model import Event, serialized_size

_LOCK_STRIPES = 64


class MutableStore:
    """Per-user append segments with read-time merge.

    Appends for users on different lock stripes never contend. A reader
    sees every append that completed before it took the user's lock.
    Duplicates across segments resolve first-write-wins.
    """

    def __init__(self, ledger: IoLedger | None = None):
        self.ledger = ledger if ledger is not None else IoLedger()
        self.retention_floor_ts: int | None = None
        self._segments: dict[int, list[list[Event]]] = {}
        self._locks = [threading.Lock() for _ in range(_LOCK_STRIPES)]
        self._evict_lock = threading.Lock()

    def _lock(self, user_id: int) -> threading.Lock:
        return self._locks[user_id % _LOCK_STRIPES]

    def append(self, user_id: int, events: Iterable[Event]) -> None:
        segment = list(events)
        if not segment:
            return
        with self._lock(user_id):
            self._segments.setdefault(user_id, []).append(segment)
        self.ledger.add("mutable_write_bytes", serialized_size(segment))

    def read_merged(self, user_id: int, up_to_ts: int) -> list[Event]:
        with self._lock(user_id):
            segments = list(self._segments.get(user_id, ()))
        merged: dict[tuple[int, int], Event] = {}
        for seg in segments:
            for e in seg:
                if e.timestamp <= up_to_ts:
                    merged.setdefault((e.timestamp, e.event_id), e)
        return [merged[k] for k in sorted(merged)]

    def evict_below(self, retention_floor_ts: int) -> int:
        """Drop events at or below the floor; returns how many were removed."""
        evicted = 0
        with self._evict_lock:
            self.retention_floor_ts = max(retention_floor_ts, self.retention_floor_ts or retention_floor_ts)
            for user_id in list(self._segments):
                with self._lock(user_id):
                    kept = []
                    for seg in self._segments[user_id]:
                        rest = [e for e in seg if e.timestamp > retention_floor_ts]
                        evicted += len(seg) - len(rest)
                        if rest:
                            kept.append(rest)
                    if kept:
                        self._segments[user_id] = kept
                    else:
                        del self._segments[user_id]
        return evicted

    def users(self) -> list[int]:
        return sorted(self._segments)

    def dump_jsonl(self, fh: TextIO) -> None:
        """Debug dump: every retained event, merged per user."""
        for user_id in self.users():
            for e in self.read_merged(user_id, 2**64 - 1):
                fh.write(e.to_json() + "\n")
