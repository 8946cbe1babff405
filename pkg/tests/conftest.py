import pytest

_RESULTS = {}


@pytest.fixture
def acceptance():
    """Record one acceptance criterion's verdict for the end-of-run summary."""

    def record(number, title, passed, detail=""):
        _RESULTS[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number:>2} {verdict}  {title}: {detail}")
