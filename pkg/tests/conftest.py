import numpy as np
import pytest
from hypothesis import settings

from emtm import _kernels

settings.register_profile("emtm", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("emtm")

BACKENDS = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    before = _kernels.backend()
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one PASS/FAIL line each, shown after the run
ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(number, title, ok, detail)`` once per acceptance criterion."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE[number] = line
        print(line)
        return ok

    yield record
    # a criterion test that raised before recording still gets a line
    name = request.node.name
    if name.startswith("test_criterion_"):
        number = int(name.split("_")[2])
        ACCEPTANCE.setdefault(number, f"criterion {number:>2} FAIL  {name} raised before reporting")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
