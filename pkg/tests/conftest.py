"""Shared test plumbing: the oracle module on the path and the acceptance report.

Acceptance tests carry ``@pytest.mark.acceptance("A#")`` and take the
``criterion`` fixture to attach a one-line measurement.  The verdict itself is
the test outcome, so a criterion can only read PASS when its assertions held.
"""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

OUTCOMES = {}


class Criterion:
    def __init__(self, code):
        self.code = code
        self.detail = ""

    def note(self, text):
        self.detail = text


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("acceptance")
    if marker is None:
        pytest.fail("the criterion fixture needs an @pytest.mark.acceptance('A#') marker")
    rec = Criterion(marker.args[0])
    request.node._criterion = rec
    return rec


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        rec = getattr(item, "_criterion", None)
        detail = rec.detail if rec else ""
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        OUTCOMES[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(OUTCOMES, key=lambda c: int(c[1:])):
        verdict, detail = OUTCOMES[code]
        terminalreporter.write_line(f"{code} {verdict}  {detail}")
