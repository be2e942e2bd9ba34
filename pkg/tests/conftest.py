import pytest

# one "criterion N: PASS|FAIL ..." line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion(capsys):
    def report(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print(f"\n{line}")

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
