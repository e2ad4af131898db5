"""Collects the outcome of tests marked ``acceptance(n, title)`` and prints
one PASS/FAIL line per criterion at the end of the run."""

import pytest

_results = {}  # criterion number -> {"title", "passed", "failed", "seconds"}
_notes = []


@pytest.fixture
def acceptance_note():
    """Append a line to the acceptance summary printed after the run."""
    return _notes.append


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            num, title = mark.args
            _results.setdefault(num, {"title": title, "passed": 0, "failed": 0, "seconds": 0.0})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if not mark:
        return
    entry = _results[mark.args[0]]
    entry["seconds"] += report.duration
    if report.failed:
        entry["failed"] += 1
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        r = _results[num]
        ok = r["failed"] == 0 and r["passed"] > 0
        status = "PASS" if ok else ("FAIL" if r["failed"] else "NOT RUN")
        terminalreporter.write_line(f"criterion {num}: {status:<7} {r['title']} "
                                    f"({r['passed']} passed, {r['failed']} failed, "
                                    f"{r['seconds']:.1f}s)")
    for line in _notes:
        terminalreporter.write_line(line)
