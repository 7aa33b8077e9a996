import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cirpose import model as model_mod
from cirpose import qem

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class CompositionMonitor:
    """Counts keypoint-query evaluations and records any that break the
    center-to-keypoint composition bit for bit."""

    def __init__(self):
        self.calls = 0
        self.violations = []

    def check(self, out):
        self.calls += 1
        composed = out.query_displacement + out.refine_displacement
        if not np.array_equal(out.total_offset, composed, equal_nan=True):
            self.violations.append(np.max(np.abs(out.total_offset - composed)))


COMPOSITION = CompositionMonitor()
_original = qem.kqe_forward_with_tape


def _checked(rk, centers, params):
    out, tape = _original(rk, centers, params)
    COMPOSITION.check(out)
    return out, tape


@pytest.fixture(autouse=True, scope="session")
def composition_monitor():
    """Every keypoint-query forward in the suite goes through the checker."""
    mp = pytest.MonkeyPatch()
    mp.setattr(qem, "kqe_forward_with_tape", _checked)
    mp.setattr(model_mod, "kqe_forward_with_tape", _checked)
    yield COMPOSITION
    mp.undo()
    assert not COMPOSITION.violations, f"composition identity broken on {len(COMPOSITION.violations)} calls"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------------ acceptance

ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "report_last: run after every other test in the session")


def pytest_collection_modifyitems(items):
    # the composition check reports on every keypoint-query call of the run
    items.sort(key=lambda item: item.get_closest_marker("report_last") is not None)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
