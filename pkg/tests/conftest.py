import pytest

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call with (passed, detail) before asserting."""
    name = request.node.name

    def record(passed: bool, detail: str = ""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
