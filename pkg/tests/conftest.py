"""Print one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    criterion = getattr(item.function, "criterion", None)
    if criterion is None:
        return
    failed = report.failed
    prev = _results.get(criterion, (item.function.__doc__ or item.name, False))
    _results[criterion] = (prev[0].strip().splitlines()[0], prev[1] or failed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        title, failed = _results[n]
        terminalreporter.write_line(f"{'FAIL' if failed else 'PASS'}  criterion {n:>2}: {title}")
