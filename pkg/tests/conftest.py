import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pathfair import oracle, scm

settings.register_profile(
    "pathfair", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pathfair")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ref_spec():
    return scm.reference_scm()


@pytest.fixture(scope="session")
def ref_joint(ref_spec):
    return oracle.enumerate_joint(ref_spec)


@pytest.fixture(scope="session")
def ref_cohort(ref_joint):
    """The exact reference distribution as a weighted cohort (one row per cell)."""
    return ref_joint.to_cohort()


@pytest.fixture(scope="session")
def binary_spec():
    return scm.binary_scm()


@pytest.fixture(scope="session")
def binary_ref():
    return oracle.binary_reference()


@pytest.fixture(scope="session")
def binary_cohort(binary_spec):
    return scm.sample(binary_spec, 8000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
