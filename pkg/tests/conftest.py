import pytest

_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record and echo one PASS/FAIL line for an acceptance criterion."""
    def emit(number, title, passed, detail, elapsed=None, budget=None):
        within = budget is None or elapsed is None or elapsed < budget
        ok = bool(passed) and within
        timing = "" if elapsed is None else f" [{elapsed:.1f}s" + (
            f" / budget {budget:g}s]" if budget else "]")
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}{timing}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
