import numpy as np
import pytest

from omtfdr.model import TwoGroupModel

_ACCEPTANCE: dict = {}
_DETAILS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): end-to-end acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(20240519)


@pytest.fixture
def iid_model():
    return TwoGroupModel.iid(8, 0.2, -2.0)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key, title in _acceptance_meta(report):
        # parametrized cases share a criterion; any failure fails it
        prev = _ACCEPTANCE.get(key, (title, "passed"))[1]
        _ACCEPTANCE[key] = (title, report.outcome if prev == "passed" else prev)


def _acceptance_meta(report):
    for mark in getattr(report, "acceptance_marks", ()):
        yield mark


@pytest.fixture
def record(request):
    """Append a measured-value line to this criterion's summary entry."""
    marks = [m.args[0] for m in request.node.iter_markers("acceptance")]

    def _record(line: str):
        for key in marks:
            _DETAILS.setdefault(key, []).append(line)
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.acceptance_marks = [(m.args[0], m.args[1]) for m in item.iter_markers("acceptance")]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[key]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {key:2d}: {verdict}  {title}")
        for line in _DETAILS.get(key, ()):
            terminalreporter.write_line(f"        {line}")
