from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_u
from scipy import stats

from adherence_forecast.metrics import (
    ConfusionMatrix,
    DaySeries,
    SingleClassEval,
    TooFewSamples,
    UndefinedMetric,
    aggregate,
    balanced_accuracy,
    ci95,
    mann_whitney_u,
    p_from_u,
    pr_curve,
    run_day_matrix,
    threshold_crossing,
)


@pytest.mark.parametrize("cm, expected", [
    ((10, 0, 0, 10), 1.0),
    ((0, 10, 10, 0), 0.0),
    ((30, 10, 20, 40), 0.5 * (30 / 40 + 40 / 60)),
])
def test_balanced_accuracy_cases(cm, expected):
    assert balanced_accuracy(ConfusionMatrix(*cm)) == pytest.approx(expected, abs=1e-15)


def test_balanced_accuracy_hand_value():
    assert balanced_accuracy(ConfusionMatrix(30, 10, 20, 40)) == pytest.approx(0.708333333333, abs=1e-12)


def test_balanced_accuracy_undefined():
    with pytest.raises(UndefinedMetric):
        balanced_accuracy(ConfusionMatrix(0, 0, 3, 4))


@settings(max_examples=100)
@given(st.integers(0, 50), st.integers(1, 50), st.integers(0, 50), st.integers(1, 50), st.integers(2, 5))
def test_balanced_accuracy_scale_invariant(tp, fn, fp, tn, k):
    a = balanced_accuracy(ConfusionMatrix(tp, fn, fp, tn))
    b = balanced_accuracy(ConfusionMatrix(k * tp, k * fn, k * fp, k * tn))
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_confusion_from_predictions():
    cm = ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert cm.to_dict() == {"tp": 2, "fn": 1, "fp": 1, "tn": 1}
    assert cm.total == 5


def test_ci95_cases():
    assert ci95([0.7] * 5) == (pytest.approx(0.7), pytest.approx(0.7))
    lo, hi = ci95([0.0, 1.0])
    assert (lo + hi) / 2 == pytest.approx(0.5)
    # t(0.975, 1) = 12.706, sample sd = sqrt(1/2)
    assert hi - 0.5 == pytest.approx(12.7062 * np.sqrt(0.5) / np.sqrt(2), rel=1e-4)
    with pytest.raises(TooFewSamples):
        ci95([1.0])


def test_ci95_monte_carlo_width():
    rng = np.random.default_rng(0)
    widths = [np.subtract(*ci95(rng.standard_normal(20))[::-1]) for _ in range(1000)]
    expected = 2 * 2.093 / np.sqrt(20)
    assert abs(np.mean(widths) - expected) <= 0.15 * expected


def test_ci95_coverage():
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(2000):
        lo, hi = ci95(rng.normal(0.6, 0.05, size=20))
        hits += lo <= 0.6 <= hi
    assert 0.93 <= hits / 2000 <= 0.97


def test_ap_perfect():
    assert pr_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).average_precision == pytest.approx(1.0, abs=1e-12)


def test_ap_reversed():
    c = pr_curve([0.9, 0.8, 0.7], [0, 0, 1])
    assert c.average_precision == pytest.approx(1 / 3, abs=1e-12)
    assert c.recall.tolist() == [0, 0, 0, 1]
    assert c.precision[0] == 1.0


def test_ap_ties_form_one_threshold():
    c = pr_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert c.average_precision == pytest.approx(0.5)
    assert len(c.thresholds) == 1


def test_ap_random_scorer_matches_prevalence():
    rng = np.random.default_rng(0)
    n, prev = 500, 0.3
    labels = np.arange(n) < int(prev * n)
    aps = [pr_curve(rng.random(n), labels).average_precision for _ in range(1000)]
    assert abs(np.mean(aps) - prev) <= 0.05


def test_ap_beats_shuffled_labels():
    rng = np.random.default_rng(4)
    gains = []
    for _ in range(200):
        labels = rng.random(60) < 0.3
        labels[:2] = [True, False]
        scores = labels + rng.normal(0, 0.8, size=60)  # planted signal
        shuffled = rng.permutation(labels)
        gains.append(pr_curve(scores, labels).average_precision
                     - pr_curve(scores, shuffled).average_precision)
    assert stats.wilcoxon(gains, alternative="greater").pvalue < 0.01


def test_ap_single_class():
    with pytest.raises(SingleClassEval):
        pr_curve([0.1, 0.2], [1, 1])


def test_pr_interpolation_envelope():
    c = pr_curve([0.9, 0.8, 0.7, 0.6], [0, 1, 0, 1])
    grid = np.linspace(0, 1, 11)
    interp = c.interpolated(grid)
    assert np.all(np.diff(interp) <= 1e-12)
    assert interp[-1] == pytest.approx(0.5)


def series(lowers, start=7):
    lowers = np.asarray(lowers, float)
    days = np.arange(start, start + len(lowers))
    return DaySeries(days, lowers + 0.05, lowers, lowers + 0.1)


def test_threshold_crossings():
    assert threshold_crossing(series([0.8] * 36), 0.7) == 7
    assert threshold_crossing(series([0.6] * 36), 0.7) is None
    assert threshold_crossing(series([0.6] * 4 + [0.66] * 32), 0.65) == 11
    assert threshold_crossing(series([0.7] * 36), 0.7) is None  # strict


def test_mwu_small_cases():
    assert mann_whitney_u([1, 2], [3, 4]).u == 0
    assert mann_whitney_u([3, 4], [1, 2]).u == 4
    a = np.random.default_rng(3).random(20)
    assert mann_whitney_u(a, a).u == 200


def test_mwu_brute_force_instances():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n1, n2 = rng.integers(1, 9, size=2)
        a = rng.integers(0, 6, size=n1).astype(float)
        b = rng.integers(0, 6, size=n2).astype(float)
        assert mann_whitney_u(a, b).u == brute_force_u(a, b)


@settings(max_examples=200)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=12),
       st.lists(st.integers(-5, 5), min_size=1, max_size=12))
def test_mwu_complementary(a, b):
    assert mann_whitney_u(a, b).u + mann_whitney_u(b, a).u == len(a) * len(b)
    assert mann_whitney_u(a, b).p_value == pytest.approx(mann_whitney_u(b, a).p_value)


def test_p_from_u_reference_value():
    assert abs(p_from_u(198, 20, 20) - 0.968) <= 0.003


@pytest.mark.parametrize("seed", range(10))
def test_mwu_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a = np.round(rng.normal(0.7, 0.03, size=20), 2)
    b = np.round(rng.normal(0.69, 0.03, size=20), 2)
    ours = mann_whitney_u(a, b)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
    assert ours.u == ref.statistic
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_mwu_exact_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(6), rng.random(7)
    ours = mann_whitney_u(a, b, exact=True)
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="exact")
    assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-9)
    with pytest.raises(ValueError):
        mann_whitney_u(np.arange(11), np.arange(11), exact=True)


@dataclass
class Fold:
    run: int
    truth: np.ndarray
    scores: np.ndarray
    days: tuple = (7, 8)


def test_aggregate_single_fold_identity():
    truth = np.array([1, 1, 0, 0, 0], bool)
    scores = np.array([[0.9, 0.2], [0.3, 0.8], [0.1, 0.1], [0.6, 0.4], [0.2, 0.3]])
    report = aggregate([Fold(0, truth, scores)], report_days=(7, 8))
    expected7 = balanced_accuracy(ConfusionMatrix.from_predictions(truth, scores[:, 0] >= 0.5))
    assert report.run_matrix[0, 0] == expected7
    assert report.series.mean[0] == expected7
    assert np.isnan(report.series.lower[0])


def test_aggregate_conservation_and_all_correct():
    rng = np.random.default_rng(0)
    folds = []
    for run in range(3):
        for _ in range(2):
            truth = rng.random(9) < 0.4
            truth[:2] = [True, False]
            scores = np.where(truth, 0.9, 0.1)[:, None].repeat(2, axis=1)
            folds.append(Fold(run, truth, scores))
    report = aggregate(folds, report_days=(7, 8))
    assert np.all(report.series.mean == 1.0)
    assert np.all(report.series.lower == 1.0) and np.all(report.series.upper == 1.0)
    assert sum(report.confusion[7]["mean"].values()) == pytest.approx(18)
    assert report.pr[7]["average_precision_mean"] == pytest.approx(1.0)
    assert report.thresholds == {"better_than_random": 7, "clinician_minimal": 7, "clinician_action": 7}


def test_pooling_modes_differ():
    f1 = Fold(0, np.array([1, 0], bool), np.array([[0.9, 0.9], [0.1, 0.1]]))
    f2 = Fold(0, np.array([1, 1, 0], bool), np.array([[0.1, 0.1], [0.1, 0.1], [0.9, 0.9]]))
    _, first = run_day_matrix([f1, f2], [7], "first")
    _, after = run_day_matrix([f1, f2], [7], "after")
    # pooled: tp 1/3, tn 1/2 ; per-fold: (1 + 0) / 2
    assert first[0, 0] == pytest.approx(0.5 * (1 / 3 + 1 / 2))
    assert after[0, 0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        run_day_matrix([f1], [7], "median")


def test_day_series_csv():
    s = DaySeries.from_run_matrix([7, 8], np.array([[0.5, 0.6], [0.7, 0.8]]))
    lines = s.to_csv().splitlines()
    assert lines[0] == "day,mean_balanced_accuracy,ci_lower,ci_upper"
    assert lines[1].startswith("7,0.6000000000,")
    assert len(lines) == 3
