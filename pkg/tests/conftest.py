import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from feddsr.tensor import get_dtype, precision_name, set_precision

settings.register_profile("feddsr", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("feddsr")


@pytest.fixture(autouse=True)
def _restore_precision():
    old = precision_name(get_dtype())
    yield
    set_precision(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance bookkeeping: one summary line per criterion
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion n")
    config.addinivalue_line("markers", "slow: multi-minute training runs")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    n, text = mark.args
    detail = dict(item.user_properties).get("detail", "")
    prev = _CRITERIA.get(n)
    ok = rep.outcome == "passed" and (prev is None or prev[0])
    details = "; ".join(d for d in ((prev[2] if prev else ""), detail) if d)
    _CRITERIA[n] = (ok, text, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, text, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {text}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
