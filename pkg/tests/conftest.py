_RESULTS: dict[int, list[bool]] = {}
_TITLES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    _TITLES[n] = title
    failed = call.excinfo is not None
    if call.when == "call" or failed:
        _RESULTS.setdefault(n, []).append(not failed)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status = "PASS" if all(_RESULTS[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {_TITLES[n]}")
