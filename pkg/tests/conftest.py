import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



# ----------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion
# ----------------------------------------------------------------------------

_CRITERIA = {}
_DETAILS = {}


@pytest.fixture
def detail(request):
    """Record a measured value shown under the criterion's summary line."""
    def add(text):
        _DETAILS.setdefault(request.node.name, []).append(str(text))
    return add


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    title = " ".join(name.split("_")[3:])
    xfail = hasattr(report, "wasxfail")
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:  # includes an unexpectedly met expected failure
            outcome = "PASS"
        elif report.skipped and not xfail:
            outcome = "SKIP"
        else:
            outcome = "FAIL"
        _CRITERIA[number] = (outcome, title, name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcome, title, name = _CRITERIA[number]
        terminalreporter.write_line(f"{outcome} criterion {number:2d}: {title}")
        for text in _DETAILS.get(name, []):
            terminalreporter.write_line(f"      {text}")
