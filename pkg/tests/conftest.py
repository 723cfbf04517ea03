"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

import pytest

_CRITERIA: dict[int, tuple[str, list[str]]] = {}
_MEASURED: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # a failing fixture counts against the criterion as well
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = marker.args
        _CRITERIA.setdefault(number, (title, []))[1].append(report.outcome)
        _MEASURED.setdefault(number, []).extend(str(v) for k, v in report.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
        for line in _MEASURED.get(number, []):
            terminalreporter.write_line(f"              {line}")
