"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_outcomes: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, {"title": title, "passed": True, "ran": False, "detail": "", "notes": []})
    if report.when == "call":
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]
    if report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        if report.failed:
            entry["passed"] = False
            entry["detail"] = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else ""


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        e = _outcomes[number]
        status = "PASS" if e["passed"] and e["ran"] else "FAIL"
        line = f"criterion {number:2d} [{status}] {e['title']}"
        if e["notes"]:
            line += " | " + "; ".join(e["notes"])
        if status == "FAIL" and e["detail"]:
            line += f" -- {e['detail'].splitlines()[0][:120]}"
        terminalreporter.write_line(line)
