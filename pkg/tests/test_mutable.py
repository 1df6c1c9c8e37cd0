import threading

from hypothesis import given
from hypothesis import strategies as st

from seqstore.metrics import IoLedger
from seqstore.model import serialized_size
from seqstore.mutable import MutableStore

from conftest import ev, user_histories

BIG = 2**63


def test_append_then_read_sorted():
    s = MutableStore()
    s.append(1, [ev(30, 3), ev(10, 1), ev(20, 2)])
    assert [e.timestamp for e in s.read_merged(1, BIG)] == [10, 20, 30]


def test_disjoint_appends_union():
    s = MutableStore()
    s.append(1, [ev(10, 1), ev(30, 3)])
    s.append(1, [ev(20, 2)])
    assert [e.event_id for e in s.read_merged(1, BIG)] == [1, 2, 3]


def test_duplicates_first_write_wins():
    s = MutableStore()
    s.append(1, [ev(10, 1, item=111)])
    s.append(1, [ev(10, 1, item=222), ev(11, 2)])
    out = s.read_merged(1, BIG)
    assert [(e.event_id, e.item_id) for e in out] == [(1, 111), (2, 20)]


def test_unknown_user_and_early_cutoff():
    s = MutableStore()
    s.append(1, [ev(10, 1)])
    assert s.read_merged(2, BIG) == []
    assert s.read_merged(1, 9) == []
    assert len(s.read_merged(1, 10)) == 1  # inclusive


def test_append_counts_bytes():
    ledger = IoLedger()
    s = MutableStore(ledger)
    batch = [ev(10, 1), ev(11, 2)]
    s.append(1, batch)
    s.append(1, [])
    assert ledger["mutable_write_bytes"] == serialized_size(batch)


def test_evict():
    s = MutableStore()
    s.append(1, [ev(10, 1), ev(20, 2), ev(30, 3)])
    assert s.evict_below(5) == 0
    assert s.evict_below(20) == 2
    assert [e.timestamp for e in s.read_merged(1, BIG)] == [30]
    assert s.retention_floor_ts == 20
    assert s.evict_below(100) == 1
    assert s.read_merged(1, BIG) == [] and s.users() == []


@given(st.lists(user_histories(max_events=25), min_size=1, max_size=5), st.integers(0, 2**62))
def test_read_merged_matches_flat_oracle(segments, up_to):
    s = MutableStore()
    for seg in segments:
        s.append(1, seg)
    first = {}
    for seg in segments:
        for e in seg:
            first.setdefault(e.sort_key, e)
    expected = [first[k] for k in sorted(first) if k[0] <= up_to]
    assert s.read_merged(1, up_to) == expected


@given(user_histories(max_events=60), st.integers(0, 2**62))
def test_evict_matches_filter_oracle(events, floor):
    s = MutableStore()
    s.append(1, events)
    evicted = s.evict_below(floor)
    assert evicted == sum(e.timestamp <= floor for e in events)
    assert s.read_merged(1, 2**64) == sorted((e for e in events if e.timestamp > floor), key=lambda e: e.sort_key)


def test_concurrent_appends_and_reads():
    s = MutableStore()
    users = range(1, 33)

    def writer(u):
        for i in range(200):
            s.append(u, [ev(i, i + 1, user=u)])

    threads = [threading.Thread(target=writer, args=(u,)) for u in users]
    for t in threads:
        t.start()
    for u in users:  # concurrent readers see sorted, deduplicated prefixes
        out = s.read_merged(u, BIG)
        assert out == sorted(out, key=lambda e: e.sort_key)
    for t in threads:
        t.join()
    assert all(len(s.read_merged(u, BIG)) == 200 for u in users)
