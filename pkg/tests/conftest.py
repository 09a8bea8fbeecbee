"""Prints the acceptance gate's criterion lines after the run summary.

Output capture swallows in-test prints for passing tests, so the gate
records its PASS/FAIL lines here and a terminal-summary hook replays them
where they are always visible.
"""

_criterion_lines: list[str] = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance gate")
    for line in _criterion_lines:
        terminalreporter.write_line(line)
