"""Acceptance summary: one PASS/FAIL line per criterion at the end of the run."""
import pytest

_RESULTS = {}
_RANK = ["PASS", "SKIP", "FAIL"]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion the test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.failed:
        status = "FAIL"
    elif rep.skipped:
        status = "SKIP"
    elif rep.when == "call":
        status = "PASS"
    else:
        return
    name = marker.args[0]
    prev = _RESULTS.get(name, "PASS")
    _RESULTS[name] = max(prev, status, key=_RANK.index)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _RESULTS.items():
        terminalreporter.write_line(f"{status}  {name}")
