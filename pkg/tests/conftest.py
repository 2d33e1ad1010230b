import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record a criterion's outcome; the summary prints one line per criterion."""

    def record(criterion: int, ok: bool, detail: str):
        previous = _VERDICTS.get(criterion)
        if previous is not None:
            ok = ok and previous[0]
            detail = f"{previous[1]}; {detail}"
        _VERDICTS[criterion] = (ok, detail)
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_VERDICTS):
        ok, detail = _VERDICTS[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
