"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

VERDICTS: dict = {}


def record(number: int, passed: bool, detail: str = "") -> None:
    prev = VERDICTS.get(number)
    ok = passed and (prev is None or prev[0])
    details = [d for d in ((prev[1] if prev else ""), detail) if d]
    VERDICTS[number] = (ok, "; ".join(details))


@pytest.fixture
def verdict():
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
