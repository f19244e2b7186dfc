import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dmfkit.matrix import Mask
from dmfkit.model import Problem, WeightStack

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_stack(rng, dims, scale=0.7):
    return WeightStack([scale * rng.standard_normal((dims[i + 1], dims[i])) for i in range(len(dims) - 1)])


def random_problem(rng, rows, cols, density=1.0):
    obs = rng.random((rows, cols)) < density
    s = rng.standard_normal((rows, cols))
    return Problem.from_matrix(s, Mask(obs))


@pytest.fixture
def np_rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
