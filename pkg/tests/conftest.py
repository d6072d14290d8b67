"""Collects the acceptance suite's verdicts and prints one line per criterion at the end of the run."""

_VERDICTS = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    detail = dict(report.user_properties).get("detail", "")
    name = report.nodeid.split("::")[-1]
    _VERDICTS.append((name, "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")
