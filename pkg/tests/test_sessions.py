import warnings
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adherence_forecast.adherence import ORIGINAL, label, label_cohort, prevalence
from adherence_forecast.sessions import (
    InvalidInterval,
    MalformedRow,
    OverlapWarning,
    SessionEvent,
    build_cohort,
    generate_synthetic_cohort,
    parse_sessions,
    serialize_sessions,
)

HEADER = "patient_id,login,logout\n"


def ev(pid, login, seconds):
    t = datetime.fromisoformat(login).replace(tzinfo=timezone.utc)
    return SessionEvent(pid, t, t + timedelta(seconds=seconds))


def test_parse_single_row():
    events = parse_sessions(HEADER + "p1,2020-01-01T10:00:00Z,2020-01-01T10:05:00Z\n")
    assert len(events) == 1
    assert events[0].patient_id == "p1"
    assert events[0].duration == 300


def test_parse_reversed_interval():
    with pytest.raises(InvalidInterval) as info:
        parse_sessions(HEADER + "p1,2020-01-01T10:05:00Z,2020-01-01T10:00:00Z\n")
    assert info.value.line == 2


def test_parse_header_only():
    assert parse_sessions(HEADER) == []


@pytest.mark.parametrize("row", [
    "p1,2020-01-01T10:00:00Z\n",
    "p1,2020-01-01 10:00,2020-01-01T10:05:00Z\n",
    "p1,2020-01-01T10:00:00Z,2020-01-01T10:05:00Z,x\n",
])
def test_parse_malformed(row):
    with pytest.raises(MalformedRow):
        parse_sessions(HEADER + row)


def test_parse_rejects_week_long_session():
    with pytest.raises(InvalidInterval):
        parse_sessions(HEADER + "p1,2020-01-01T00:00:00Z,2020-01-08T00:00:00Z\n")


def test_parse_preserves_row_order():
    text = HEADER + ("p2,2020-01-02T10:00:00Z,2020-01-02T10:01:00Z\n"
                     "p1,2020-01-01T10:00:00Z,2020-01-01T10:01:00Z\n")
    assert [e.patient_id for e in parse_sessions(text)] == ["p2", "p1"]


def test_build_cohort_groups():
    events = [ev("p1", "2020-01-01T10:00", 60), ev("p2", "2020-01-01T11:00", 60),
              ev("p1", "2020-01-02T10:00", 60), ev("p2", "2020-01-03T10:00", 60),
              ev("p1", "2020-01-03T10:00", 60)]
    cohort = build_cohort(events)
    assert cohort.patient_ids == ["p1", "p2"]
    assert [len(r.sessions) for r in cohort] == [3, 2]


def test_build_cohort_sorts_sessions():
    events = [ev("p1", "2020-01-05T10:00", 60), ev("p1", "2020-01-01T10:00", 60),
              ev("p1", "2020-01-03T10:00", 60)]
    (rec,) = build_cohort(events).records
    logins = [s.login for s in rec.sessions]
    assert logins == sorted(logins)


def test_build_cohort_overlap_warns_once():
    events = [ev("p1", "2020-01-01T10:00", 600), ev("p1", "2020-01-01T10:05", 600)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cohort = build_cohort(events)
    overlap = [w for w in caught if issubclass(w.category, OverlapWarning)]
    assert len(overlap) == 1
    assert len(cohort) == 1
    assert cohort.overlaps == ("p1",)


def test_synthetic_determinism():
    a = generate_synthetic_cohort(10, 10, 70, seed=1)
    b = generate_synthetic_cohort(10, 10, 70, seed=1)
    assert len(a) == 20
    assert a == b
    assert serialize_sessions(a.events()) == serialize_sessions(b.events())


def test_synthetic_seed_changes_output():
    a = generate_synthetic_cohort(5, 5, 70, seed=1)
    b = generate_synthetic_cohort(5, 5, 70, seed=2)
    assert serialize_sessions(a.events()) != serialize_sessions(b.events())


def test_synthetic_all_dropouts():
    cohort = generate_synthetic_cohort(0, 5, 70, seed=2)
    assert len(cohort) == 5
    assert all(not label(r, ORIGINAL).adherent for r in cohort)


def test_synthetic_planted_prevalence_exact():
    cohort = generate_synthetic_cohort(100, 100, 70, seed=3)
    assert prevalence(label_cohort(cohort, ORIGINAL)) == (100, 200)


def test_synthetic_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_synthetic_cohort(-1, 5)
    with pytest.raises(ValueError):
        generate_synthetic_cohort(5, 5, horizon_days=30)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 10_000))
def test_serialize_parse_round_trip(n_good, n_bad, seed):
    cohort = generate_synthetic_cohort(n_good, n_bad, 60, seed=seed)
    text = serialize_sessions(cohort.events())
    assert all(r.durations.min() > 0 for r in cohort)
    assert serialize_sessions(parse_sessions(text)) == text
    assert build_cohort(parse_sessions(text)).events() == sorted(
        cohort.events(), key=lambda e: (e.patient_id, e.login))
