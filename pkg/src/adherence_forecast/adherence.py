"""Binary adherence labels from session histories.

A patient is adherent when enough sessions last longer than the amount
threshold (frequency) and the last such session falls late enough after
the first login (duration).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .sessions import Cohort, PatientRecord

DAY = 86400


@dataclass(frozen=True)
class AdherenceDefinition:
    min_span_days: int
    min_connections: int
    min_session_seconds: int
    # True: span counts both endpoint calendar days; False: elapsed whole days.
    inclusive_span: bool = True

    def __post_init__(self) -> None:
        for name in ("min_span_days", "min_connections", "min_session_seconds"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


ORIGINAL = AdherenceDefinition(56, 8, 60)
ALTERNATIVE_A = AdherenceDefinition(56, 12, 150)
ALTERNATIVE_B = AdherenceDefinition(56, 16, 300)

PRESETS = {"original": ORIGINAL, "alt-a": ALTERNATIVE_A, "alt-b": ALTERNATIVE_B}


@dataclass(frozen=True)
class AdherenceLabel:
    patient_id: str
    adherent: bool
    qualifying_connections: int
    span_days: int


def day_index(ts) -> int:
    """Calendar-day index (UTC midnights) of a timestamp."""
    return int(ts.timestamp() // DAY)


def qualifying_connections(record: PatientRecord, definition: AdherenceDefinition) -> int:
    return sum(1 for s in record.sessions if s.duration > definition.min_session_seconds)


def label(record: PatientRecord, definition: AdherenceDefinition) -> AdherenceLabel:
    qualifying = [s for s in record.sessions if s.duration > definition.min_session_seconds]
    if qualifying:
        last = max(s.login for s in qualifying)
        if definition.inclusive_span:
            span = day_index(last) - day_index(record.first_login) + 1
        else:
            span = int((last - record.first_login).total_seconds() // DAY)
    else:
        span = 0
    adherent = (len(qualifying) >= definition.min_connections
                and span >= definition.min_span_days)
    return AdherenceLabel(record.patient_id, adherent, len(qualifying), span)


def label_cohort(cohort: Iterable[PatientRecord],
                 definition: AdherenceDefinition) -> dict[str, AdherenceLabel]:
    return {r.patient_id: label(r, definition) for r in cohort}


def filter_trivial(cohort: Cohort) -> Cohort:
    """Drop patients who connected only once."""
    return Cohort(tuple(r for r in cohort.records if len(r.sessions) >= 2),
                  cohort.provenance, cohort.seed)


def labels_to_csv(labels: Iterable[AdherenceLabel]) -> str:
    lines = ["patient_id,adherent,qualifying_connections,span_days"]
    for lab in labels:
        lines.append(f"{lab.patient_id},{int(lab.adherent)},"
                     f"{lab.qualifying_connections},{lab.span_days}")
    return "\n".join(lines) + "\n"


def prevalence(labels: dict[str, AdherenceLabel]) -> tuple[int, int]:
    """(non-adherent count, total)."""
    n_bad = sum(1 for lab in labels.values() if not lab.adherent)
    return n_bad, len(labels)
