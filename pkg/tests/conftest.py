import numpy as np
import pytest

from headseg.phantom import PhantomSpec, generate


@pytest.fixture(scope="session")
def phantom48():
    """Noise-free 48^3 phantom: (t1, t2, truth, record)."""
    return generate(PhantomSpec(seed=3, grid=48))


@pytest.fixture(scope="session")
def phantom64():
    return generate(PhantomSpec(seed=5, grid=64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n = mark.args[0]
    ok, notes = _ACCEPTANCE.get(n, (True, []))
    ok = ok and rep.passed
    notes = notes + [v for k, v in item.user_properties if k == "detail" and rep.when == "call"]
    _ACCEPTANCE[n] = (ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, notes = _ACCEPTANCE[n]
        detail = "; ".join(notes)
        terminalreporter.write_line(f"acceptance {n}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
