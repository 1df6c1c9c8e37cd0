from hypothesis import given
from hypothesis import strategies as st

from seqstore.fatrow import generate_fat_row, project_fat_row
from seqstore.immutable import ImmutableStore, compact
from seqstore.metrics import IoLedger
from seqstore.model import DEFAULT_FEATURE_GROUPS, MS_PER_DAY, TenantSpec
from seqstore.mutable import MutableStore
from seqstore.protocol import RankingRequest, make_latemat_example, reconstruct, snapshot_at_inference

from conftest import T0, ev, user_histories

TRAITS = frozenset({"item_id", "event_type", "watch_time_ms", "share_target"})
LOGGING = TenantSpec("logging", {"dense_views": 50, "sparse_explicit": 20}, TRAITS)


def stores(events, as_of):
    immutable = ImmutableStore()
    immutable.publish(compact(events, DEFAULT_FEATURE_GROUPS, None, as_of, stripe_capacity=8))
    mutable = MutableStore()
    mutable.append(1, [e for e in events if e.timestamp > as_of])
    return mutable, immutable


def test_empty_history():
    mutable, immutable = stores([], T0)
    x = generate_fat_row(RankingRequest(1, T0 + 5, 1), LOGGING, mutable, immutable, example_id=1,
                         label_ts=T0 + 6, labels={})
    assert all(seq == () for seq in x.materialized.values())
    assert project_fat_row(x, LOGGING) == []


def test_static_history_duplicated_across_k_requests():
    events = [ev(T0 + i * 1000, i + 1) for i in range(40)]
    as_of = T0 + 100_000
    mutable, immutable = stores(events, as_of)
    rows = [generate_fat_row(RankingRequest(1, as_of + k * 60_000, k), LOGGING, mutable, immutable,
                             example_id=k, label_ts=as_of + k * 60_000 + 1, labels={}) for k in range(1, 5)]
    payloads = {r.uih_payload_dict().__repr__() for r in rows}
    assert len(payloads) == 1
    assert len({r.request_ts for r in rows}) == 4


def test_ledger_counts_whole_line():
    mutable, immutable = stores([ev(T0, 1)], T0)
    ledger = IoLedger()
    x = generate_fat_row(RankingRequest(1, T0 + 5, 1), LOGGING, mutable, immutable, example_id=1,
                         label_ts=T0 + 6, labels={}, ledger=ledger)
    assert ledger["primary_write_bytes"] == len(x.to_json().encode()) + 1


@given(user_histories(max_events=200), st.integers(0, 2 * MS_PER_DAY), st.integers(1, 50), st.integers(0, 20),
       st.sampled_from([frozenset(), frozenset({"item_id"}), TRAITS]))
def test_cross_path_equivalence(events, req_off, dense, sparse, traits):
    as_of = T0 + 35 * MS_PER_DAY
    request = RankingRequest(1, as_of + req_off, 1)
    mutable, immutable = stores(events, as_of)
    snap = snapshot_at_inference(request, LOGGING, mutable, immutable)
    kw = dict(example_id=1, label_ts=request.request_ts + 1, labels={})
    fat = generate_fat_row(request, LOGGING, mutable, immutable, **kw)
    late = make_latemat_example(snap, scalar_features=b"", **kw)
    for tenant in (LOGGING, TenantSpec("sub", {"dense_views": dense, "sparse_explicit": sparse}, traits)):
        assert project_fat_row(fat, tenant) == reconstruct(late, tenant, immutable)
