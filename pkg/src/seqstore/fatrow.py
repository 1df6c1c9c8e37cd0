"""Fat-row baseline: the full history is copied into every example.

It goes through the same inference snapshot as late materialization, so it
doubles as the ground-truth oracle and as the bandwidth baseline.
"""

from __future__ import annotations

from typing import Mapping

from seqstore.immutable import ImmutableStore
from seqstore.metrics import IoLedger
from seqstore.model import Event, TenantSpec, TrainingExample
from seqstore.mutable import MutableStore
from seqstore.protocol import InferenceSnapshot, RankingRequest, merge_sorted, snapshot_at_inference


def fat_row_from_snapshot(
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
        mutable_snapshot=(),
        materialized={g: tuple(seq) for g, seq in snapshot.by_group.items()},
    )
    if ledger is not None:
        ledger.add("primary_write_bytes", example.section_sizes()["total"])
    return example


def generate_fat_row(
    request: RankingRequest,
    tenant: TenantSpec,
    mutable: MutableStore,
    immutable: ImmutableStore,
    *,
    example_id: int,
    label_ts: int,
    labels: Mapping[str, float],
    scalar_features: bytes = b"",
    ledger: IoLedger | None = None,
) -> TrainingExample:
    snapshot = snapshot_at_inference(request, tenant, mutable, immutable)
    return fat_row_from_snapshot(snapshot, example_id=example_id, label_ts=label_ts, labels=labels,
                                 scalar_features=scalar_features, ledger=ledger)


def project_fat_row(example: TrainingExample, tenant: TenantSpec) -> list[Event]:
    """What a tenant trains on from a fat row: per-group tails, projected traits."""
    if example.materialized is None:
        raise ValueError("not a fat-row example")
    parts = []
    for group, seq in sorted(example.materialized.items()):
        n = tenant.target(group)
        tail = seq[max(0, len(seq) - n) :] if n > 0 else ()
        parts.append([e.project(tenant.required_traits) for e in tail])
    return merge_sorted(parts)
