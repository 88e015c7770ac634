import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class CriterionReport:
    """Collects one line per acceptance criterion; printed at the end of the session."""

    def __call__(self, number: int, name: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = (name, bool(passed), detail)
        return bool(passed)


@pytest.fixture
def criterion():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:>2}. {name}: {detail}")
