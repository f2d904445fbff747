import pytest

# criterion number -> (passed, detail), filled in by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(criterion, passed, detail):
        ACCEPTANCE[criterion] = (bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
