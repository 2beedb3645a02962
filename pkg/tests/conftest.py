import os

import numpy as np
import pytest

from adherence_forecast.model import _kernels_py, kernels
from adherence_forecast.sessions import generate_synthetic_cohort

BACKENDS = [pytest.param(_kernels_py, id="python")]
if kernels.compiled_available():
    from adherence_forecast.model import _kernels

    BACKENDS.append(pytest.param(_kernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(20, 20, 70, seed=11)


# -- acceptance summary ------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    number, text = crit
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria[number] = (status, text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, text = _criteria[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {text}")
    dataset = os.environ.get("ADHERENCE_DATASET")
    if not dataset:
        terminalreporter.write_line(
            "note: dataset-conditional criteria need ADHERENCE_DATASET (sessions CSV) "
            "and ADHERENCE_EXPLORATION_IDS")
