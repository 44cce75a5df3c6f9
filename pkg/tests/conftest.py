import pytest

# (criterion number, title, passed, detail), appended by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def record_criterion():
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
