import numpy as np
import pytest

from ssrseg.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=0.1):
    # keeps relu/abs kinks out of the finite-difference stencil
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
