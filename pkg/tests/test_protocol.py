import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqstore.errors import (
    ConfigError,
    CoverageGapError,
    FutureLeakageError,
    O2OViolationError,
    ScrubDivergenceError,
    StaleGenerationError,
)
from seqstore.immutable import DeletionList, ImmutableStore, compact
from seqstore.model import DEFAULT_FEATURE_GROUPS, MS_PER_DAY, Event, TenantSpec, compute_checksum
from seqstore.mutable import MutableStore
from seqstore.protocol import (
    RankingRequest,
    assert_no_future_leakage,
    make_latemat_example,
    merge_sorted,
    reconstruct,
    snapshot_at_inference,
)

from conftest import T0, ev, user_histories

GROUPS = DEFAULT_FEATURE_GROUPS
TRAITS = frozenset({"item_id", "event_type", "watch_time_ms", "share_target"})
LOGGING = TenantSpec("logging", {"dense_views": 60, "sparse_explicit": 25}, TRAITS)


def world(events, as_of, *, deletions=None, keep=None, gid=1):
    immutable = ImmutableStore(keep_generations=keep)
    immutable.publish(compact(events, GROUPS, deletions, as_of, generation_id=gid, stripe_capacity=8))
    mutable = MutableStore()
    mutable.append(1, [e for e in events if e.timestamp > as_of])
    return mutable, immutable


def flat_oracle(events, request_ts, tenant):
    parts = []
    for g in GROUPS:
        lo = request_ts - g.lookback_days * MS_PER_DAY + 1
        window = sorted((e for e in events if e.event_type in g.event_types and lo <= e.timestamp <= request_ts),
                        key=lambda e: e.sort_key)
        n = tenant.target(g.name)
        parts.append([e.project(tenant.required_traits) for e in window[max(0, len(window) - n):]] if n else [])
    return merge_sorted(parts)


def log_example(snap, example_id=1):
    return make_latemat_example(snap, example_id=example_id, label_ts=snap.request.request_ts + 1,
                                labels={"click": 1.0}, scalar_features=b"")


class TestSnapshot:
    def test_new_user(self):
        mutable, immutable = world([ev(T0, 1, user=1)], T0 + MS_PER_DAY)
        snap = snapshot_at_inference(RankingRequest(99, T0 + MS_PER_DAY + 5, 1), LOGGING, mutable, immutable)
        assert snap.mutable_snapshot == () and snap.full_sequence == ()
        assert set(snap.version_metadata.seq_length.values()) == {0}
        assert snap.version_metadata.checksum == 0xCBF29CE484222325

    def test_only_mutable_events(self):
        as_of = T0
        events = [ev(T0 + 10, 1), ev(T0 + 20, 2, etype="like")]
        mutable, immutable = world(events, as_of)
        snap = snapshot_at_inference(RankingRequest(1, T0 + 100, 1), LOGGING, mutable, immutable)
        assert snap.full_sequence == snap.mutable_snapshot
        assert [e.event_id for e in snap.full_sequence] == [1, 2]

    def test_request_exactly_at_event(self):
        events = [ev(T0 + 10, 1), ev(T0 + 20, 2)]
        mutable, immutable = world(events, T0)
        snap = snapshot_at_inference(RankingRequest(1, T0 + 20, 1), LOGGING, mutable, immutable)
        assert [e.event_id for e in snap.full_sequence] == [1, 2]

    def test_coverage_gap(self):
        mutable, immutable = world([ev(T0, 1)], T0 + 100)
        mutable.evict_below(T0 + 200)
        with pytest.raises(CoverageGapError):
            snapshot_at_inference(RankingRequest(1, T0 + 300, 1), LOGGING, mutable, immutable)

    def test_request_before_generation_horizon(self):
        events = [ev(T0 + i * 1000, i + 1) for i in range(50)]
        mutable, immutable = world(events, T0 + 49_000)
        snap = snapshot_at_inference(RankingRequest(1, T0 + 20_000, 1), LOGGING, mutable, immutable)
        assert snap.version_metadata.end_ts == T0 + 20_000
        assert snap.full_sequence[-1].event_id == 21

    @given(user_histories(max_events=250), st.integers(0, 40 * MS_PER_DAY), st.integers(0, 2 * MS_PER_DAY))
    def test_matches_flat_oracle_and_reconstructs(self, events, as_of_off, req_off):
        as_of = T0 + as_of_off
        request_ts = as_of + req_off
        mutable, immutable = world(events, as_of)
        snap = snapshot_at_inference(RankingRequest(1, request_ts, 1), LOGGING, mutable, immutable)
        assert list(snap.full_sequence) == flat_oracle(events, request_ts, LOGGING)
        example = log_example(snap)
        assert reconstruct(example, LOGGING, immutable) == list(snap.full_sequence)
        assert reconstruct(example, LOGGING, immutable, verify="full") == list(snap.full_sequence)

    @given(user_histories(max_events=250), st.integers(1, 80), st.integers(0, 30),
           st.sampled_from([frozenset(), frozenset({"item_id"}), TRAITS]))
    def test_sub_tenant_equals_its_oracle(self, events, dense, sparse, traits):
        as_of = T0 + 35 * MS_PER_DAY
        request_ts = as_of + MS_PER_DAY // 2
        mutable, immutable = world(events, as_of)
        example = log_example(snapshot_at_inference(RankingRequest(1, request_ts, 1), LOGGING, mutable, immutable))
        sub = TenantSpec("sub", {"dense_views": min(dense, 60), "sparse_explicit": min(sparse, 25)}, traits)
        assert reconstruct(example, sub, immutable) == flat_oracle(events, request_ts, sub)


class TestReconstruct:
    def setup_world(self):
        events = [ev(T0 + i * 60_000, i + 1, etype="view" if i % 3 else "like") for i in range(120)]
        as_of = T0 + 100 * 60_000
        mutable, immutable = world(events, as_of, keep=1)
        snap = snapshot_at_inference(RankingRequest(1, as_of + 30 * 60_000, 1), LOGGING, mutable, immutable)
        return events, immutable, snap, log_example(snap)

    def test_late_events_excluded(self):
        events, immutable, snap, example = self.setup_world()
        # events arriving after the request land in a newer generation; the pinned one is unchanged
        late = [ev(snap.request.request_ts + 1, 10_000), ev(snap.request.request_ts - 5, 10_001)]
        store = ImmutableStore(keep_generations=None)
        store.publish(immutable.get())
        store.publish(compact(events + late, GROUPS, None, snap.request.request_ts + 10, generation_id=2,
                              stripe_capacity=8))
        out = reconstruct(example, LOGGING, store)
        assert out == list(snap.full_sequence)
        assert_no_future_leakage(out, example.request_ts)

    def test_stale_generation(self):
        events, immutable, snap, example = self.setup_world()
        immutable.publish(compact(events, GROUPS, None, immutable.live.as_of_ts, generation_id=2))
        with pytest.raises(StaleGenerationError):
            reconstruct(example, LOGGING, immutable)
        # identical content in the live generation still verifies
        assert reconstruct(example, LOGGING, immutable, fallback_to_live=True) == list(snap.full_sequence)

    def test_scrub_divergence_on_fallback(self):
        events, immutable, snap, example = self.setup_world()
        victim = snap.full_sequence[0].item_id
        immutable.publish(compact(events, GROUPS, DeletionList(item_ids=frozenset({victim})),
                                  immutable.live.as_of_ts, generation_id=2))
        with pytest.raises(ScrubDivergenceError):
            reconstruct(example, LOGGING, immutable, fallback_to_live=True)

    @pytest.mark.parametrize("fault", ["drop", "duplicate", "shift"])
    def test_corruption_detected(self, fault):
        events, immutable, snap, example = self.setup_world()
        as_of = immutable.live.as_of_ts
        inside = [e for e in events if e.timestamp <= as_of]
        target = inside[-3]
        if fault == "drop":
            corrupted = [e for e in events if e is not target]
        elif fault == "duplicate":
            corrupted = events + [Event(1, 50_000, target.timestamp, target.item_id, target.event_type, {})]
        else:
            corrupted = [Event(1, e.event_id, e.timestamp + 1, e.item_id, e.event_type, e.traits) if e is target else e
                         for e in events]
        store = ImmutableStore()
        store.publish(compact(corrupted, GROUPS, None, as_of, generation_id=1, stripe_capacity=8))
        with pytest.raises(O2OViolationError):
            reconstruct(example, LOGGING, store)

    def test_empty_history(self):
        mutable, immutable = world([], T0)
        example = log_example(snapshot_at_inference(RankingRequest(1, T0 + 5, 1), LOGGING, mutable, immutable))
        assert reconstruct(example, LOGGING, immutable) == []

    def test_bad_verify_mode(self):
        _, immutable, _, example = self.setup_world()
        with pytest.raises(ConfigError):
            reconstruct(example, LOGGING, immutable, verify="none")

    def test_metadata_size_independent_of_length(self):
        short = [ev(T0 + i, i + 1) for i in range(10)]
        long = [ev(T0 + i, i + 1) for i in range(10_000)]
        big = TenantSpec("big", {"dense_views": 10_000, "sparse_explicit": 10_000}, TRAITS)
        sizes = []
        for events in (short, long):
            mutable, immutable = world(events, T0 + 20_000)
            snap = snapshot_at_inference(RankingRequest(1, T0 + 30_000, 1), big, mutable, immutable)
            sizes.append(snap.version_metadata.serialized_size())
        assert sizes[0] == sizes[1]


class TestLeakage:
    def test_boundaries(self):
        assert_no_future_leakage([ev(5, 1), ev(10, 2)], 10)
        assert_no_future_leakage([], 0)
        with pytest.raises(FutureLeakageError) as info:
            assert_no_future_leakage([ev(5, 1), ev(11, 2)], 10)
        assert [e.event_id for e in info.value.offending] == [2]


def test_checksum_covers_scanned_window_in_group_order():
    events = [ev(T0 + 1, 1), ev(T0 + 2, 2, etype="like"), ev(T0 + 3, 3)]
    mutable, immutable = world(events, T0 + 10)
    snap = snapshot_at_inference(RankingRequest(1, T0 + 20, 1), LOGGING, mutable, immutable)
    dense = [e for e in events if e.event_type == "view"]
    sparse = [e for e in events if e.event_type == "like"]
    assert snap.version_metadata.checksum == compute_checksum(dense + sparse)
    assert snap.version_metadata.start_ts == T0 + 1
