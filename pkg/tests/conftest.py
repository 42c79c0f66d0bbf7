import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Print and record one PASS/FAIL line for an acceptance criterion."""
    def _report(n, ok: bool, detail: str = ""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(line)
        _ACCEPTANCE.append(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
