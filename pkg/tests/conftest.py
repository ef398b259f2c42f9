import pytest

_RESULTS = pytest.StashKey[list]()


class AcceptanceLog:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, lines: list):
        self._lines = lines

    def record(self, number: int, title: str, checks: dict, elapsed: float, limit: float, detail: str = "") -> None:
        checks = dict(checks, runtime=elapsed < limit)
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}  [{elapsed:.1f} s / limit {limit:.0f} s]"
        if detail:
            line += f"  {detail}"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        self._lines.append((number, line))
        assert ok, line


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def acceptance(request):
    return AcceptanceLog(request.config.stash[_RESULTS])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
