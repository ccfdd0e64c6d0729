import sys

import numpy as np
import pytest

from tvcontrol.dynamics import TimeGrid, make_system
from tvcontrol.models import two_mass_demo


def oscillator(k=1.0, c=0.0, T=1.0, K=100, x0=1.0, x1=0.0, b=1.0, forcing=None):
    """Scalar ``x'' + c x' + k x = F + b u``."""
    return make_system({"M": [[1.0]], "C": [[c]], "K": [[k]], "B": [[b]]},
                       forcing=forcing, initial_data=([x0], [x1]), grid=TimeGrid(T, K))


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


@pytest.fixture(scope="session")
def two_mass():
    return two_mass_demo()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
