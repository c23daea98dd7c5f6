import pytest

_ACCEPTANCE = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and rep.when == "call":
        _ACCEPTANCE.append((marker.args[0], item.name, rep.passed, getattr(item, "acceptance_detail", "")))


@pytest.fixture
def detail(request):
    """Call with a string to attach a measurement to the acceptance summary line."""
    def record(text):
        request.node.acceptance_detail = text
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, passed, info in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}  {info}".rstrip())
