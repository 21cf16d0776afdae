import pytest

RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.stash[RESULTS] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the test's acceptance criterion, then assert it."""
    n = request.node.get_closest_marker("criterion").args[0]
    results = request.config.stash[RESULTS]

    def record(ok: bool, detail: str):
        results[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and rep.failed:
        results = item.config.stash[RESULTS]
        results.setdefault(marker.args[0], (False, f"error during {rep.when}: {call.excinfo.typename}"))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
