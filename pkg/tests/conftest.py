_acceptance_outcomes = []


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full-tolerance acceptance criteria (slower)"
    )


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_outcomes.append((report.nodeid.split("::")[-1],
                                     report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome, duration in _acceptance_outcomes:
        terminalreporter.write_line(
            f"{name}: {outcome.upper()} ({duration:.1f}s)"
        )
