"""Collects the acceptance-criterion verdicts and prints them after the run."""
import pytest

N_CRITERIA = 10
_verdicts = {}


@pytest.fixture(scope="session")
def report():
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _verdicts[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_verdicts.get(n, f"criterion {n:2d}: FAIL  not run or raised before reporting"))
