import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""
    def record(number, title, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        _LINES.append(f"criterion {number:>2} {status}  {title}: {detail}")
        assert ok, detail

    def skip(number, title, reason):
        _LINES.append(f"criterion {number:>2} SKIP  {title}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
