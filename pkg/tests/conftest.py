"""Shared pytest plumbing for the acceptance gate.

Acceptance tests append one formatted pass/fail line per criterion to
ACCEPTANCE_LINES; the hook below replays them in the terminal summary
so they are visible even without ``-s``.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
