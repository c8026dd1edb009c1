import numpy as np
import pytest

from qoetune.core import QualityLevel, VideoManifest


@pytest.fixture
def ladder3():
    """Sizes 1, 2, 4 Mb with 1 s segments."""
    return VideoManifest((QualityLevel(1000, 1, 1.0), QualityLevel(2000, 2, 2.0), QualityLevel(4000, 3, 4.0)), 1.0, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def report_criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
