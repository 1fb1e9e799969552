import pytest

_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Records one pass/fail line per acceptance criterion for the summary."""
    def record(criterion: int, name: str, passed: bool, detail: str = ""):
        _RESULTS.append((criterion, name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, name, passed, detail in sorted(_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {criterion} [{status}] {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
