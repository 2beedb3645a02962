"""Daily login features, standardization, prefix expansion and batch collation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .adherence import DAY, day_index
from .sessions import PatientRecord

MIN_LEN = 7
MAX_LEN = 42
N_FEATURES = 2


@dataclass(frozen=True)
class DailyFeatures:
    logged_in: np.ndarray       # (days,) 0/1
    logged_seconds: np.ndarray  # (days,) seconds, clamped to one day

    def matrix(self) -> np.ndarray:
        """Stack into a 2 x days float array (row 0: logged_in, row 1: seconds)."""
        return np.vstack([self.logged_in, self.logged_seconds]).astype(np.float64)

    def __len__(self) -> int:
        return len(self.logged_in)


def daily_features(record: PatientRecord, horizon_days: int = MAX_LEN) -> DailyFeatures:
    """Per-calendar-day login flag and logged time, day 1 = first login's day.

    Sessions crossing UTC midnight are split between the days they touch.
    """
    if horizon_days < 1:
        raise ValueError("horizon_days must be >= 1")
    origin = day_index(record.first_login) * DAY
    seconds = np.zeros(horizon_days, dtype=np.float64)
    for s in record.sessions:
        start = s.login.timestamp() - origin
        end = s.logout.timestamp() - origin
        first_day = int(start // DAY)
        last_day = int(np.ceil(end / DAY)) - 1
        for d in range(max(first_day, 0), min(last_day, horizon_days - 1) + 1):
            lo = max(start, d * DAY)
            hi = min(end, (d + 1) * DAY)
            if hi > lo:
                seconds[d] += hi - lo
    np.minimum(seconds, DAY, out=seconds)
    return DailyFeatures((seconds > 0).astype(np.float64), seconds)


class EmptyTrainingSet(ValueError):
    pass


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray  # (2,)
    std: np.ndarray   # (2,)

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.mean[:, None]) / self.std[:, None]

    def inverse(self, matrix: np.ndarray) -> np.ndarray:
        return matrix * self.std[:, None] + self.mean[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_scaler(training: Sequence[DailyFeatures], n_days: int = MAX_LEN) -> Scaler:
    """Per-feature mean/std pooled over every (patient, day) cell of the first ``n_days``."""
    if not training:
        raise EmptyTrainingSet("cannot fit a scaler on zero patients")
    cells = np.concatenate([f.matrix()[:, :n_days] for f in training], axis=1)
    mean = cells.mean(axis=1)
    std = cells.std(axis=1)
    std = np.where(std < 1e-8, 1.0, std)
    return Scaler(mean, std)


@dataclass(frozen=True)
class FeatureSequence:
    values: np.ndarray  # (2, length)
    label: bool         # True = non-adherent (positive class)
    patient_id: str

    @property
    def length(self) -> int:
        return self.values.shape[1]


def expand_prefixes(values: np.ndarray, label: bool, patient_id: str = "",
                    min_len: int = MIN_LEN, max_len: int = MAX_LEN,
                    lengths: Iterable[int] | None = None) -> list[FeatureSequence]:
    """One sequence per prefix length in ``[min_len, max_len]`` (or ``lengths``).

    ``values`` is a 2 x days matrix, normally already scaled; histories shorter
    than ``max_len`` must have been zero-filled upstream (``daily_features``
    does this for any horizon).
    """
    if values.shape[1] < max_len:
        raise ValueError(f"need >= {max_len} days of features, got {values.shape[1]}")
    if lengths is None:
        lengths = range(min_len, max_len + 1)
    return [FeatureSequence(values[:, :t].copy(), bool(label), patient_id) for t in lengths]


@dataclass(frozen=True)
class Batch:
    values: np.ndarray   # (B, 2, T_max)
    mask: np.ndarray     # (B, T_max) bool, True on real days
    labels: np.ndarray   # (B,) bool

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def __len__(self) -> int:
        return self.values.shape[0]


def collate(sequences: Sequence[FeatureSequence]) -> Batch:
    if not sequences:
        raise ValueError("cannot collate an empty list")
    t_max = max(s.length for s in sequences)
    b = len(sequences)
    values = np.zeros((b, N_FEATURES, t_max), dtype=np.float64)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(sequences):
        values[i, :, : s.length] = s.values
        mask[i, : s.length] = True
    labels = np.array([s.label for s in sequences], dtype=bool)
    return Batch(values, mask, labels)


def features_to_csv(rows: Iterable[tuple[str, DailyFeatures]]) -> str:
    """Debug dump: ``patient_id,day,logged_in,logged_seconds`` with 1-based days."""
    lines = ["patient_id,day,logged_in,logged_seconds"]
    for pid, feats in rows:
        for d in range(len(feats)):
            lines.append(f"{pid},{d + 1},{int(feats.logged_in[d])},"
                         f"{feats.logged_seconds[d]:g}")
    return "\n".join(lines) + "\n"
