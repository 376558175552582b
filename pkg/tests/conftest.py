import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    outcomes = {}
    for key in ("passed", "failed", "error", "skipped"):
        for report in terminalreporter.stats.get(key, []):
            match = _CRITERION.search(getattr(report, "nodeid", ""))
            if not match or report.when not in ("call", "setup"):
                continue
            number, name = int(match.group(1)), match.group(2).replace("_", " ")
            if key == "passed" and report.when == "setup":
                continue
            outcomes[number] = ("PASS" if key == "passed" else "FAIL", name)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(outcomes):
        status, name = outcomes[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}")
