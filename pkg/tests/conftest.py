"""Shared pytest hooks: print one PASS/FAIL line per acceptance criterion."""

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(
            f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}")
