import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (number, title, passed, detail)."""
    def record(number, title, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed
    return record


def skip_criterion(number, title, reason):
    line = f"criterion {number} [SKIP] {title}: {reason}"
    _CRITERIA.append((number, line))
    print(line)
    pytest.skip(reason)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda x: x[0]):
        terminalreporter.write_line(line)
