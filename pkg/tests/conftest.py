"""Prints one PASS/FAIL line per acceptance criterion at the end of the run.

Acceptance tests tag themselves with ``record_property("criterion", name)``
and optionally ``record_property("detail", text)``.
"""

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _criteria[name] = (status, str(props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _criteria.items():
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
