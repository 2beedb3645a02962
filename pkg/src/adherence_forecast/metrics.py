"""Evaluation metrics: balanced accuracy, t-based confidence intervals,
precision-recall / average precision, threshold crossings, Mann-Whitney U,
and aggregation of cross-validated predictions into per-day reports.

The positive class throughout is non-adherent (dropout).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

REPORT_DAYS = (7, 11, 20, 42)
THRESHOLDS = {"better_than_random": 0.50, "clinician_minimal": 0.65, "clinician_action": 0.70}


class UndefinedMetric(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class SingleClassEval(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: float
    fn: float
    fp: float
    tn: float

    @classmethod
    def from_predictions(cls, truth: Sequence[bool], predicted: Sequence[bool]) -> "ConfusionMatrix":
        t = np.asarray(truth, dtype=bool)
        p = np.asarray(predicted, dtype=bool)
        return cls(int(np.sum(t & p)), int(np.sum(t & ~p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)))

    @property
    def total(self) -> float:
        return self.tp + self.fn + self.fp + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    pos = cm.tp + cm.fn
    neg = cm.tn + cm.fp
    if pos <= 0 or neg <= 0:
        raise UndefinedMetric("balanced accuracy needs support in both classes")
    return 0.5 * (cm.tp / pos + cm.tn / neg)


def ci95(samples: Sequence[float]) -> tuple[float, float]:
    """Two-sided 95% Student-t interval for the mean."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise TooFewSamples("need at least two samples for a confidence interval")
    mean = x.mean()
    half = stats.t.ppf(0.975, n - 1) * x.std(ddof=1) / math.sqrt(n)
    return float(mean - half), float(mean + half)


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    average_precision: float

    def interpolated(self, grid: np.ndarray) -> np.ndarray:
        """Precision envelope (max precision at recall >= r) sampled on ``grid``."""
        out = np.empty_like(grid, dtype=np.float64)
        for i, r in enumerate(grid):
            ok = self.recall >= r - 1e-12
            out[i] = self.precision[ok].max() if ok.any() else 0.0
        return out


def pr_curve(scores: Sequence[float], labels: Sequence[bool]) -> PRCurve:
    """Precision/recall at every distinct score threshold, plus step-wise AP.

    AP = sum_n (R_n - R_{n-1}) P_n over thresholds in decreasing order. The
    curve starts at (recall 0, precision 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClassEval("precision-recall needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n_pos
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(np.r_[0.0, recall], np.r_[1.0, precision], s[last], ap)


@dataclass(frozen=True)
class DaySeries:
    days: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_csv(self) -> str:
        lines = ["day,mean_balanced_accuracy,ci_lower,ci_upper"]
        for d, m, lo, hi in zip(self.days, self.mean, self.lower, self.upper):
            lines.append(f"{int(d)},{m:.10f},{lo:.10f},{hi:.10f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_run_matrix(cls, days: Sequence[int], values: np.ndarray) -> "DaySeries":
        """Series from an (n_runs, n_days) matrix; the CI is NaN with a single run."""
        values = np.atleast_2d(values)
        mean = values.mean(axis=0)
        if values.shape[0] < 2:
            nan = np.full_like(mean, np.nan)
            return cls(np.asarray(days), mean, nan, nan.copy())
        bounds = np.array([ci95(values[:, j]) for j in range(values.shape[1])])
        # zero-variance columns: keep the interval exactly on the mean
        lo = np.minimum(bounds[:, 0], mean)
        hi = np.maximum(bounds[:, 1], mean)
        return cls(np.asarray(days), mean, lo, hi)


def threshold_crossing(series: DaySeries, threshold: float) -> int | None:
    """First day whose CI lower bound strictly exceeds ``threshold``."""
    for d, lo in zip(series.days, series.lower):
        if lo > threshold:
            return int(d)
    return None


# -- Mann-Whitney U ---------------------------------------------------------

@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float


def _u_statistic(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)  # midranks for ties
    n1 = a.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u), ranks


def _tie_term(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    return float(np.sum(counts ** 3 - counts))


def p_from_u(u: float, n1: int, n2: int, tie_term: float = 0.0) -> float:
    """Two-sided p-value, normal approximation with tie and continuity corrections.

    ``tie_term`` is sum(t^3 - t) over tie groups of the pooled sample.
    """
    n = n1 + n2
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    if z <= 0:
        return 1.0
    return float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def _exact_p(u: float, ranks: np.ndarray, n1: int) -> float:
    offset = n1 * (n1 + 1) / 2.0
    us = np.array([ranks[list(c)].sum() - offset
                   for c in itertools.combinations(range(ranks.size), n1)])
    mu = n1 * (ranks.size - n1) / 2.0
    dev = abs(u - mu)
    return float(np.mean(np.abs(us - mu) >= dev - 1e-9))


def mann_whitney_u(a: Sequence[float], b: Sequence[float], exact: bool = False) -> MannWhitneyResult:
    """U for sample ``a`` (midranks for ties) and its two-sided p-value.

    ``exact=True`` enumerates the permutation distribution (pooled size <= 20).
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be nonempty")
    u, ranks = _u_statistic(x, y)
    if exact:
        if x.size + y.size > 20:
            raise ValueError("exact mode supports pooled samples of at most 20")
        return MannWhitneyResult(u, _exact_p(u, ranks, x.size))
    tie = _tie_term(np.concatenate([x, y]))
    return MannWhitneyResult(u, p_from_u(u, x.size, y.size, tie))


# -- aggregation of cross-validated predictions -----------------------------

def _fold_ba(truth: np.ndarray, scores: np.ndarray) -> float:
    return balanced_accuracy(ConfusionMatrix.from_predictions(truth, scores >= 0.5))


def run_day_matrix(folds: Iterable, days: Sequence[int], pool: str = "first") -> tuple[list[int], np.ndarray]:
    """(n_runs, n_days) balanced accuracies from per-fold predictions.

    ``folds`` items need ``run``, ``days``, ``truth`` and ``scores`` attributes.
    ``pool="first"`` concatenates a run's fold predictions before scoring;
    ``pool="after"`` averages per-fold balanced accuracies (skipping folds
    where the metric is undefined).
    """
    if pool not in ("first", "after"):
        raise ValueError("pool must be 'first' or 'after'")
    by_run: dict[int, list] = {}
    for f in folds:
        by_run.setdefault(f.run, []).append(f)
    runs = sorted(by_run)
    out = np.full((len(runs), len(days)), np.nan)
    for ri, r in enumerate(runs):
        for di, d in enumerate(days):
            parts = [(f.truth, f.scores[:, list(f.days).index(d)]) for f in by_run[r]]
            if pool == "first":
                truth = np.concatenate([p[0] for p in parts])
                scores = np.concatenate([p[1] for p in parts])
                out[ri, di] = _fold_ba(truth, scores)
            else:
                vals = []
                for t, s in parts:
                    try:
                        vals.append(_fold_ba(t, s))
                    except UndefinedMetric:
                        pass
                out[ri, di] = np.mean(vals) if vals else np.nan
    return runs, out


@dataclass
class EvaluationReport:
    days: list[int]
    run_matrix: np.ndarray
    series: DaySeries
    confusion: dict[int, dict]
    pr: dict[int, dict]
    thresholds: dict[str, int | None]

    def thresholds_json(self) -> dict:
        return {name: {"threshold": THRESHOLDS[name], "first_day": day}
                for name, day in self.thresholds.items()}


def aggregate(folds: Sequence, pool: str = "first",
              report_days: Sequence[int] = REPORT_DAYS) -> EvaluationReport:
    """Per-day balanced-accuracy series, run-averaged confusion matrices, PR summaries."""
    folds = list(folds)
    days = [int(d) for d in folds[0].days]
    runs, matrix = run_day_matrix(folds, days, pool)
    series = DaySeries.from_run_matrix(days, matrix)
    confusion: dict[int, dict] = {}
    pr: dict[int, dict] = {}
    grid = np.linspace(0.0, 1.0, 101)
    for d in report_days:
        if d not in days:
            continue
        j = days.index(d)
        cms, aps, curves, prevalences = [], [], [], []
        for r in runs:
            fs = [f for f in folds if f.run == r]
            truth = np.concatenate([f.truth for f in fs])
            scores = np.concatenate([f.scores[:, j] for f in fs])
            cms.append(ConfusionMatrix.from_predictions(truth, scores >= 0.5))
            prevalences.append(float(truth.mean()))
            try:
                c = pr_curve(scores, truth)
            except SingleClassEval:
                continue
            aps.append(c.average_precision)
            curves.append(c.interpolated(grid))
        mean_cm = {k: float(np.mean([getattr(c, k) for c in cms])) for k in ("tp", "fn", "fp", "tn")}
        confusion[d] = {"day": d, "mean": mean_cm, "per_run": [c.to_dict() for c in cms]}
        curves_arr = np.array(curves) if curves else np.zeros((0, grid.size))
        pr[d] = {
            "day": d,
            "average_precision_mean": float(np.mean(aps)) if aps else None,
            "average_precision_std": float(np.std(aps)) if aps else None,
            "average_precision_per_run": aps,
            "baseline": float(np.mean(prevalences)),
            "recall": grid.tolist(),
            "precision_mean": curves_arr.mean(axis=0).tolist() if curves else [],
            "precision_std": curves_arr.std(axis=0).tolist() if curves else [],
        }
    crossings = {name: threshold_crossing(series, t) for name, t in THRESHOLDS.items()}
    return EvaluationReport(days, matrix, series, confusion, pr, crossings)
