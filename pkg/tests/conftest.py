import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)`` for the end-of-run acceptance summary."""
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
