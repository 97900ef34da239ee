"""Collects acceptance-criterion outcomes and prints one line per criterion
at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if rep.when == "call" or rep.failed or rep.skipped:
        detail = dict(item.user_properties).get("measured", "")
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _RESULTS.get(n)
        if prev is None or prev[1] == "PASS":
            _RESULTS[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2} [{status}] {title}" + (f" -- {detail}" if detail else ""))
