import pytest

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL for an acceptance criterion, then assert."""

    def record(number, ok, detail):
        VERDICTS[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(VERDICTS[number])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
