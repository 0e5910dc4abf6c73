import pytest

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture()
def verdict():
    """Record an acceptance verdict, then assert it.

    Every recorded criterion is echoed as one PASS/FAIL line at the end of the
    session, also when its test fails.
    """

    def record(criterion: str, ok: bool, detail: str) -> None:
        _VERDICTS[criterion] = (bool(ok), detail)
        assert ok, f"{criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        ok, detail = _VERDICTS[criterion]
        terminalreporter.write_line(f"{criterion} {'PASS' if ok else 'FAIL'}  {detail}")
