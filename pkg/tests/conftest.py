import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the verdict line for one acceptance criterion."""

    def record(n: int, ok: bool | None, detail: str) -> None:
        verdict = {True: "PASS", False: "FAIL", None: "NOT RUN"}[ok]
        line = f"criterion {n:2d}: {verdict}  {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
