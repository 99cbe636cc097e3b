import pytest

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record a result for an acceptance criterion: record(number, passed, detail).

    A criterion checked by several tests passes only if every part passes.
    """

    def record(number, passed, detail):
        ok, parts = ACCEPTANCE.get(number, (True, []))
        ACCEPTANCE[number] = (ok and bool(passed), parts + [detail])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, parts = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {'; '.join(parts)}")
