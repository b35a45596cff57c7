import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one summary line per acceptance criterion, printed after the run
_acceptance = []


@pytest.fixture
def criterion(request):
    """Attach a one-line measured summary to an acceptance test."""
    def note(text):
        request.node.user_properties.append(("criterion", text))
    return note


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        notes = [v for k, v in report.user_properties if k == "criterion"]
        name = report.nodeid.split("::")[-1]
        _acceptance.append((name, report.outcome, "; ".join(notes)))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, notes in _acceptance:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}: {notes}")
