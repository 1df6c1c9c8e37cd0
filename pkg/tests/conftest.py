import os

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from seqstore.model import DEFAULT_FEATURE_GROUPS, EVENT_TYPES, Event, TenantSpec

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DAY = 86_400_000
T0 = 1_767_225_600_000


def ev(ts, eid, user=1, etype="view", item=None, **traits):
    return Event(user, eid, ts, eid * 10 if item is None else item, etype, traits)


@st.composite
def user_histories(draw, user_id=1, max_events=300, span_ms=40 * DAY):
    """One user's events with unique (timestamp, event_id), unsorted."""
    n = draw(st.integers(0, max_events))
    stamps = draw(st.lists(st.integers(T0, T0 + span_ms), min_size=n, max_size=n))
    out = []
    for i, ts in enumerate(stamps):
        etype = draw(st.sampled_from(EVENT_TYPES))
        traits = {}
        if etype == "video_watch":
            traits["watch_time_ms"] = draw(st.integers(0, 10**6))
        if etype == "share" and draw(st.booleans()):
            traits["share_target"] = draw(st.sampled_from(["friend", "story"]))
        out.append(Event(user_id, i + 1, ts, draw(st.integers(1, 2**40)), etype, traits))
    return out


@pytest.fixture
def groups():
    return DEFAULT_FEATURE_GROUPS


@pytest.fixture
def wide_tenant():
    return TenantSpec("wide", {"dense_views": 10_000, "sparse_explicit": 10_000},
                      frozenset({"item_id", "event_type", "watch_time_ms", "share_target", "dwell_ratio",
                                 "comment_text_len"}))


# --- acceptance summary -------------------------------------------------------
# Tests marked ``acceptance(number, title)`` report one PASS/FAIL line each at
# the end of the run; details come from ``record_property("detail", ...)``.

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")
    config._acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    number, title = marker.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if status != "PASS" and not detail:
        detail = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else ""
    results = item.config._acceptance_results
    if results.get(number, ("", "PASS"))[1] == "PASS":
        results[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        terminalreporter.write_line(f"{status} criterion {number:2d} {title}" + (f" -- {detail}" if detail else ""))
