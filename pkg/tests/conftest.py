import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecse.backbones import PetShape
from ecse.training import make_toy_dataset, random_rotation

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Smaller than the desk default so the unit tests stay quick.
SMALL_PET = PetShape(d_pet=8, d_ffn=16, n_heads=2)


def rotations(n, seed=0):
    rng = np.random.default_rng(seed)
    return [random_rotation(rng).rotation for _ in range(n)]


@pytest.fixture(scope="session")
def ch4_set():
    return make_toy_dataset("ch4_like", 6, seed=11)


@pytest.fixture(scope="session")
def periodic_set():
    return make_toy_dataset("periodic", 3, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
