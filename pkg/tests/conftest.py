import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_MODULE = "test_acceptance.py"

# nodeid -> "passed" / "failed" / "skipped" for every test run in this session
OUTCOMES: dict[str, str] = {}
# criterion number -> (passed, one-line detail)
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record the verdict of one acceptance criterion for the final summary."""

    def record(number: int, passed: bool, detail: str):
        CRITERIA[number] = (bool(passed), detail)
        return passed

    return record


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the property-suite criterion can read the outcomes
    items.sort(key=lambda item: item.path.name == ACCEPTANCE_MODULE)


def pytest_runtest_logreport(report):
    previous = OUTCOMES.get(report.nodeid)
    if report.failed:
        OUTCOMES[report.nodeid] = "failed"
    elif report.skipped and previous is None:
        OUTCOMES[report.nodeid] = "skipped"
    elif report.when == "call" and previous != "failed":
        OUTCOMES[report.nodeid] = "passed"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def session_outcomes():
    return OUTCOMES
