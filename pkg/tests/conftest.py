from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def golden() -> Path:
    return GOLDEN


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def report(criterion: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
