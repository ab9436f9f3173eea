import numpy as np
import pytest

from attnfer.rng import Stream

_criteria = {}
_outcomes = {}


@pytest.fixture
def stream():
    return Stream(12345)


def randn(seed, *shape):
    return Stream(seed, 99).normal(int(np.prod(shape))).reshape(shape)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            _criteria[item.nodeid] = m.args[0]


def pytest_runtest_logreport(report):
    criterion = _criteria.get(report.nodeid)
    if criterion is None:
        return
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if failed or report.when == "call":
        prev = _outcomes.get(report.nodeid, True)
        _outcomes[report.nodeid] = prev and not failed


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    by_criterion = {}
    for nodeid, ok in _outcomes.items():
        key = _criteria[nodeid]
        by_criterion[key] = by_criterion.get(key, True) and ok
    terminalreporter.section("acceptance criteria")
    for (num, title), ok in sorted(by_criterion.items()):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}")
