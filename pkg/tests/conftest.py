import criteria_log


def pytest_terminal_summary(terminalreporter):
    if criteria_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in criteria_log.LINES:
            terminalreporter.write_line(line)
