import pytest

from petrihh.jssp import parse_taillard

TWO_BY_TWO = "2 2\n3 2\n2 4\n1 2\n2 1"

_criteria: dict = {}


@pytest.fixture
def one_by_one():
    return parse_taillard("1 1\n5\n1", name="one")


@pytest.fixture
def two_by_two():
    return parse_taillard(TWO_BY_TWO, name="two")


@pytest.fixture
def criterion():
    """Record a one-line verdict per acceptance criterion."""
    def record(number, passed, detail=""):
        _criteria[number] = (passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
