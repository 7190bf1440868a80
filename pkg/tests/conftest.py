import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """Store one acceptance line per criterion; later calls overwrite."""

    def _record(num: int, ok: bool, detail: str) -> bool:
        _LINES[num] = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_LINES):
        terminalreporter.write_line(_LINES[num])
