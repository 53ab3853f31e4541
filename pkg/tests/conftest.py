import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Record one acceptance line; returns ``passed`` so tests can ``assert record(...)``."""
    results = request.config.stash.setdefault(_RESULTS, [])

    def _record(name, passed, detail=""):
        results.append((name, bool(passed), detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed, detail in results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
