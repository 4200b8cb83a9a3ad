import pytest

_CRITERIA: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, ok, detail)``."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        ok = bool(ok)
        _CRITERIA.append((number, title, ok, detail))
        print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_CRITERIA, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
