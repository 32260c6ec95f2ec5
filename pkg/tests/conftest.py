import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(name)
        if prev is None or prev[0] == "passed":
            _criteria[name] = (report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[2])):
        outcome, duration = _criteria[name]
        label = "PASS" if outcome == "passed" else outcome.upper()
        n = name.split("_")[2]
        desc = " ".join(name.split("_")[3:])
        tr.write_line(f"criterion {n}: {label:7s} {desc} ({duration:.1f}s)")
