import pytest

# one verdict line per acceptance criterion, printed in the terminal summary
_VERDICTS: dict[int, str] = {}
_DETAILS: dict[str, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test decides")


@pytest.fixture
def detail(request):
    """Attach a measured value to the verdict line of the running criterion."""
    def add(text: str) -> None:
        _DETAILS.setdefault(request.node.nodeid, []).append(text)
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    verdict = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    extra = "; ".join(_DETAILS.get(item.nodeid, []))
    _VERDICTS[number] = f"criterion {number:>2}: {verdict}  {title}" + (f"  [{extra}]" if extra else "")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
