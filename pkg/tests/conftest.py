import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; it is echoed in the terminal summary."""

    def record(number, name, passed, detail=""):
        _ACCEPTANCE.append((number, name, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>4} {name}: {detail}")
