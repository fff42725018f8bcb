import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def record():
    """Print and keep one verdict line per acceptance criterion."""

    def emit(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        _LINES.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
