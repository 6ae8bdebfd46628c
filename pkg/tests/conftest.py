import pytest

_verdicts: list[str] = []


class Verdict:
    """Records one PASS/FAIL line for an acceptance criterion, then asserts it."""

    def __call__(self, number: int, title: str, passed: bool, detail: str) -> None:
        _verdicts.append(f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}")
        assert passed, f"criterion {number} ({title}) not met: {detail}"


@pytest.fixture
def verdict():
    return Verdict()


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance")
        for line in sorted(_verdicts, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
