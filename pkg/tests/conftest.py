import pytest

_CRITERIA_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the terminal summary")
    config.stash[_CRITERIA_KEY] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed_early = report.when == "setup" and not report.passed
    if report.when == "call" or failed_early:
        item.config.stash[_CRITERIA_KEY].append((marker.args[0], report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in results:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")
