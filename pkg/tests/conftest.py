import pytest

_LINES = pytest.StashKey[dict]()


def format_line(number, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number, ok, detail):
        lines[number] = format_line(number, ok, detail)
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
