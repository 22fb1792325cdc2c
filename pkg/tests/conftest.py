import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def aluminium():
    from microscale_id.voigt import lame_from_engineering
    return lame_from_engineering(70.0, 0.3)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line, then fail the test if the check failed."""
    def _report(number, title, ok, detail):
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
