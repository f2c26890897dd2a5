import pytest

ACCEPTANCE: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


@pytest.fixture
def criterion():
    def check(number: int, ok: bool, detail: str):
        record(number, ok, detail)
        print(f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return check


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}")
