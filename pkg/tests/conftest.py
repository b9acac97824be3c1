"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import pytest

_RESULTS = {}


@pytest.fixture
def acceptance():
    """Call ``acceptance(number, title, body)``; body returns a detail string or raises."""

    def check(number, title, body):
        try:
            detail = body()
        except BaseException as exc:
            _RESULTS[number] = f"FAIL criterion {number}: {title} ({type(exc).__name__}: {exc})"
            raise
        _RESULTS[number] = f"PASS criterion {number}: {title} ({detail})"

    return check


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[number].splitlines()[0])
