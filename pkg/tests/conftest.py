import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; repeated in the terminal summary."""
    def record(number, ok, detail, soft=False):
        status = ("met" if ok else "not met") + " (soft, not enforced)" if soft else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
