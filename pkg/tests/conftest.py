import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def report_line():
    """Record one acceptance line; shown in the terminal summary."""

    def record(criterion: str, ok: bool | None, detail: str):
        # ok=None marks a supplementary comparison that is reported but not graded
        tag = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{tag}  {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
