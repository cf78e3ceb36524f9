def pytest_terminal_summary(terminalreporter):
    """Acceptance-criterion verdicts, one line each, shown even though the
    per-test prints are captured."""
    try:
        from test_acceptance import REPORT_LINES
    except ImportError:
        return
    if REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in REPORT_LINES:
            terminalreporter.write_line(line)
