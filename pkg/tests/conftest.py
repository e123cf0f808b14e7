import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Append ``(number, ok, detail)`` for the end-of-run acceptance summary."""
    return request.config.stash.setdefault(_RESULTS, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(_RESULTS, [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
