import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.skipped and not rep.failed):
        return
    n, title = mark.args
    status = "SKIP" if rep.skipped else "FAIL" if rep.failed else "PASS"
    detail = dict(item.user_properties).get("detail", "")
    if rep.skipped and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2].removeprefix("Skipped: ")
    elif rep.failed:
        detail = (detail + "; " if detail else "") + str(call.excinfo.value).splitlines()[0][:160]
    # a failure in setup or teardown overrides a passing call
    if rep.when == "call" or status != "PASS":
        _CRITERIA[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" ({detail})" if detail else ""))
