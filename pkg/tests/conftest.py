import pytest

_criteria = {}


@pytest.fixture
def criterion():
    """Record the outcome of a numbered acceptance criterion for the end-of-run summary."""

    def record(number, title, passed, detail=""):
        _criteria[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail = _criteria[number]
        line = f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
