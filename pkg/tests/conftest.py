"""Collects acceptance verdicts and repeats them in the terminal summary, so
the PASS/FAIL lines survive pytest's output capture."""
import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, name: str, ok: bool, measured: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {name}: {measured}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
