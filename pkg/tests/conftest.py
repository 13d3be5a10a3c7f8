"""One pass/fail line per acceptance criterion at the end of the run."""

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    detail = dict(report.user_properties).get("detail", "")
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        _CRITERIA[name] = ("SKIP", reason.removeprefix("Skipped: "))
    elif report.failed:
        _CRITERIA[name] = ("FAIL", detail)
    elif report.when == "call":
        _CRITERIA[name] = ("PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"{verdict:4}  {name}" + (f"  [{detail}]" if detail else ""))
