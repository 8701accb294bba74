import pytest

RESULTS = []


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, ok, detail)."""
    def add(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        RESULTS.append(line)
        print(line)
        return ok
    return add


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
