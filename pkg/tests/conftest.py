import pytest

_LINES: list[str] = []


class Criterion:
    """Records one acceptance line; the assertion itself stays in the test."""

    def __call__(self, number: int, passed: bool, detail: str, flagged: bool = False) -> bool:
        status = "PASS" if passed else "FAIL"
        if passed and flagged:
            status = "PASS (FLAGGED)"
        line = f"criterion {number}: {status}  {detail}"
        _LINES.append(line)
        print(line)
        return passed


@pytest.fixture
def criterion():
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
