import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, ok: bool, detail: str) -> None:
        lines[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(lines[n])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
