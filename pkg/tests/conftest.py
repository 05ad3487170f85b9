import numpy as np
import pytest

_acceptance = {}
_details = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    num, title = mark.args
    prev = _acceptance.get(num, (title, True))
    ok = prev[1] and not report.failed
    _acceptance[num] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance):
        title, ok = _acceptance[num]
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {title}"
        if num in _details:
            line += f"  [{_details[num]}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def measured(request):
    """Attach measured values to the criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def note(text):
        print(text)
        _details[mark.args[0]] = text

    return note
