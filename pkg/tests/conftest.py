"""Shared pytest hooks.

The acceptance suite (test_acceptance.py) records one line per numbered
criterion on the pytest config object; print them after the run so the
verdicts are visible even when per-test output is captured.
"""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
