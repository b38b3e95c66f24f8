from hypothesis import HealthCheck, settings

# the sandbox CPU is shared and jittery; wall-clock deadlines only add flakes
settings.register_profile(
    "repo", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
