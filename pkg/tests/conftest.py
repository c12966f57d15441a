import pytest

# (criterion number, title) -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[(number, title)] = (passed, detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
