import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture
def criterion(pytestconfig):
    """Record one acceptance line: ``criterion(number, title, passed, detail)``.

    The line is echoed immediately and repeated in the terminal summary so
    that the verdicts survive output capture.
    """
    capture = pytestconfig.pluginmanager.getplugin("capturemanager")

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail}"
        _LINES.append((number, line))
        with capture.global_and_fixture_disabled():
            print(f"\n{line}", flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
