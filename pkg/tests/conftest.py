import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus():
    from hybrid_slm.trainer import load_corpus
    return load_corpus()


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    ran = getattr(terminalreporter.config, "_acceptance_selected", set())
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_collection_finish(session):
    session.config._acceptance_selected = {m.args[0] for item in session.items
                                           for m in item.iter_markers("criterion")}
