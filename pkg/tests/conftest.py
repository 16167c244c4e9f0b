import pytest

_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append ``(criterion, passed, detail)``; printed in the terminal summary."""
    def record(criterion, passed, detail):
        _LINES.append(f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
