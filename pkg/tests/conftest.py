"""Shared test plumbing: acceptance criteria reporting."""

import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail summary line for an acceptance criterion."""

    def _report(number: int, passed: bool, detail: str) -> None:
        verdict = "PASS" if passed else "FAIL"
        line = f"CRITERION {number}: {verdict} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
