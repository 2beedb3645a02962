"""Login/logout session records: parsing, cohort assembly, synthetic cohorts.

Sessions CSV format (UTF-8, LF line endings)::

    patient_id,login,logout
    p1,2020-01-01T10:00:00Z,2020-01-01T10:05:00Z

Timestamps are ISO-8601 UTC with second resolution and a trailing ``Z``.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

HEADER = ("patient_id", "login", "logout")
TIME_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
MAX_SESSION_SECONDS = 7 * 86400

SYNTHETIC_EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)


class SessionDataError(ValueError):
    """Base class for session input errors; carries the 1-based line number."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class MalformedRow(SessionDataError):
    pass


class InvalidInterval(SessionDataError):
    pass


class OverlapWarning(UserWarning):
    pass


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, TIME_FORMAT).replace(tzinfo=timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIME_FORMAT)


@dataclass(frozen=True, order=True)
class SessionEvent:
    patient_id: str
    login: datetime
    logout: datetime

    @property
    def duration(self) -> float:
        return (self.logout - self.login).total_seconds()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    sessions: tuple[SessionEvent, ...]

    def __post_init__(self) -> None:
        if not self.sessions:
            raise ValueError(f"patient {self.patient_id!r} has no sessions")
        ordered = tuple(sorted(self.sessions, key=lambda s: (s.login, s.logout)))
        object.__setattr__(self, "sessions", ordered)

    @property
    def first_login(self) -> datetime:
        return self.sessions[0].login

    @property
    def durations(self) -> np.ndarray:
        return np.array([s.duration for s in self.sessions], dtype=np.float64)


@dataclass(frozen=True)
class Cohort:
    records: tuple[PatientRecord, ...]
    provenance: str = "real"
    seed: int | None = None
    overlaps: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids in cohort")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def subset(self, patient_ids: Iterable[str]) -> "Cohort":
        wanted = set(patient_ids)
        return Cohort(
            tuple(r for r in self.records if r.patient_id in wanted),
            self.provenance,
            self.seed,
        )

    def events(self) -> list[SessionEvent]:
        return [s for r in self.records for s in r.sessions]


def parse_sessions(csv_text: str) -> list[SessionEvent]:
    """Parse sessions CSV text into events, preserving input row order.

    Raises MalformedRow for a bad header, wrong column count or unparseable
    timestamp, and InvalidInterval when logout <= login or the session runs
    longer than seven days.
    """
    reader = csv.reader(io.StringIO(csv_text))
    events: list[SessionEvent] = []
    header_seen = False
    for line_no, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if not header_seen:
            header_seen = True
            if tuple(c.strip() for c in row) == HEADER:
                continue
        if len(row) != 3:
            raise MalformedRow(line_no, f"expected 3 columns, got {len(row)}")
        pid, login_s, logout_s = (c.strip() for c in row)
        if not pid:
            raise MalformedRow(line_no, "empty patient_id")
        try:
            login = parse_timestamp(login_s)
            logout = parse_timestamp(logout_s)
        except ValueError as exc:
            raise MalformedRow(line_no, f"bad timestamp ({exc})") from None
        if logout <= login:
            raise InvalidInterval(line_no, "logout must be after login")
        if (logout - login).total_seconds() >= MAX_SESSION_SECONDS:
            raise InvalidInterval(line_no, "session longer than 7 days")
        events.append(SessionEvent(pid, login, logout))
    return events


def read_sessions(path) -> list[SessionEvent]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_sessions(fh.read())


def serialize_sessions(events: Iterable[SessionEvent]) -> str:
    """Normalized CSV: sorted by patient then login, LF endings."""
    ordered = sorted(events, key=lambda e: (e.patient_id, e.login, e.logout))
    lines = [",".join(HEADER)]
    lines += [
        f"{e.patient_id},{format_timestamp(e.login)},{format_timestamp(e.logout)}"
        for e in ordered
    ]
    return "\n".join(lines) + "\n"


def build_cohort(events: Sequence[SessionEvent], provenance: str = "real",
                 seed: int | None = None) -> Cohort:
    """Group events per patient (first-appearance order), sorting sessions by login.

    Overlapping sessions of one patient are kept and reported through an
    OverlapWarning; the offending ids are listed on ``Cohort.overlaps``.
    """
    grouped: dict[str, list[SessionEvent]] = {}
    for e in events:
        grouped.setdefault(e.patient_id, []).append(e)
    records = []
    overlaps = []
    for pid, sessions in grouped.items():
        rec = PatientRecord(pid, tuple(sessions))
        ss = rec.sessions
        if any(ss[i + 1].login < ss[i].logout for i in range(len(ss) - 1)):
            overlaps.append(pid)
            warnings.warn(f"overlapping sessions for patient {pid}", OverlapWarning,
                          stacklevel=2)
        records.append(rec)
    return Cohort(tuple(records), provenance, seed, tuple(overlaps))


def load_cohort(path) -> Cohort:
    return build_cohort(read_sessions(path))


# -- synthetic cohorts ------------------------------------------------------

ADHERENT_LOGIN_P = 0.35
ADHERENT_MEDIAN_S = 600.0
DROPOUT_LOGIN_P0 = 0.5
DROPOUT_DECAY = 0.85
DROPOUT_MEDIAN_S = 180.0
DURATION_LOG_SIGMA = 0.5


def _synthetic_patient(pid: str, adherent: bool, horizon_days: int,
                       rng: np.random.Generator) -> PatientRecord:
    start_day = int(rng.integers(0, 365))
    days = np.arange(horizon_days)
    if adherent:
        p = np.full(horizon_days, ADHERENT_LOGIN_P)
        median = ADHERENT_MEDIAN_S
    else:
        p = DROPOUT_LOGIN_P0 * DROPOUT_DECAY ** days
        median = DROPOUT_MEDIAN_S
    active = rng.random(horizon_days) < p
    active[0] = True
    sessions = []
    for d in days[active]:
        dur = int(np.clip(round(median * np.exp(DURATION_LOG_SIGMA * rng.standard_normal())),
                          1, 6 * 3600))
        offset = int(rng.integers(0, 86400 - dur))
        login = SYNTHETIC_EPOCH + timedelta(days=start_day + int(d), seconds=offset)
        sessions.append(SessionEvent(pid, login, login + timedelta(seconds=dur)))
    return PatientRecord(pid, tuple(sessions))


def generate_synthetic_cohort(n_adherent: int, n_dropout: int, horizon_days: int = 70,
                              seed: int = 0) -> Cohort:
    """Two-archetype synthetic cohort with planted adherence labels.

    Adherent patients log in with a constant daily probability and long
    sessions; dropouts start eager, their login probability decays
    geometrically, and their sessions are short. Each individual is redrawn
    until the Original adherence definition agrees with its archetype, so
    the planted labels are exact.
    """
    from .adherence import ORIGINAL, label  # local import: adherence depends on us

    if n_adherent < 0 or n_dropout < 0:
        raise ValueError("patient counts must be >= 0")
    if horizon_days < 56:
        raise ValueError("horizon_days must be >= 56")
    rng = np.random.default_rng(seed)
    archetypes = np.array([True] * n_adherent + [False] * n_dropout)
    rng.shuffle(archetypes)
    records = []
    for i, adherent in enumerate(archetypes):
        pid = f"syn{seed}-{i:05d}"
        while True:
            rec = _synthetic_patient(pid, bool(adherent), horizon_days, rng)
            if label(rec, ORIGINAL).adherent == bool(adherent):
                break
        records.append(rec)
    return Cohort(tuple(records), "synthetic", seed)
