import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, name, ok, detail)`` records one acceptance line and asserts it."""

    def record(n: int, name: str, ok: bool, detail: str = ""):
        ACCEPTANCE[n] = (name, bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {name}: {detail}")
        assert ok, f"criterion {n} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {name}: {detail}")
