import numpy as np
import pytest

from twostage_tmle.data import ClusterRecord, TrialData
from twostage_tmle.simgen import SimParams, generate_trial


def make_cluster(cid="c", a=0, w1=(0.2, 0.4), w2=(1, 0), w3=(1, 1), delta=(1, 1), y1=(1, 0), y2=(0, 0),
                 e1c=0.0, e2c=0.0, **kw):
    return ClusterRecord(cid, e1c, e2c, a, list(w1), list(w2), list(w3), list(delta), list(y1), list(y2), **kw)


@pytest.fixture(scope="session")
def small_trial():
    return generate_trial(SimParams(j=12), seed=11)


@pytest.fixture(scope="session")
def default_trial():
    return generate_trial(SimParams(), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# --- acceptance reporting ----------------------------------------------------
# Tests marked ``criterion(n, label)`` are grouped; a criterion passes only if
# every one of its tests passes. One line per criterion is printed at the end.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion membership")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, label = marker.args
    entry = _CRITERIA.setdefault(number, {"label": label, "tests": {}})
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        details = [v for k, v in report.user_properties if k == "detail"]
        prev = entry["tests"].get(item.name)
        ok = (prev is None or prev[0]) and report.passed
        entry["tests"][item.name] = (ok and not failed, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = all(passed for passed, _ in entry["tests"].values())
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {entry['label']}")
        for name, (passed, details) in entry["tests"].items():
            mark = "ok  " if passed else "FAIL"
            extra = f" ({'; '.join(details)})" if details else ""
            terminalreporter.write_line(f"    {mark} {name}{extra}")
