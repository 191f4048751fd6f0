import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}
NOTES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE and not NOTES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    for note in NOTES:
        terminalreporter.write_line(f"note: {note}")


@pytest.fixture
def record():
    def _record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return _record
