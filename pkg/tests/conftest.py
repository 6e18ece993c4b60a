import numpy as np
import pytest

from vesselforge import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    previous = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary so it survives output capture
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, name, ok, detail, informational=False):
        status = "INFO" if informational else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number:>2}: {name}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
