import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line, printed in the terminal summary, then assert."""

    def check(name: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
