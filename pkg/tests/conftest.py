import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    entry = _CRITERIA.setdefault(number, {"text": text, "status": []})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["status"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        statuses = entry["status"]
        if not statuses:
            verdict = "NOT RUN"
        elif all(s == "skipped" for s in statuses):
            verdict = "SKIP"
        elif all(s == "passed" for s in statuses):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict:7s} {entry['text']}")
