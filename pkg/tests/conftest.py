import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line criterion verdict; printed in the terminal summary."""

    def add(number: int, ok: bool, detail: str) -> bool:
        _LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        print(_LINES[-1])
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
