import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from styleadv.episodes import SyntheticDomainSpec, generate_domain
from styleadv.model import StyleAdvModel

settings.register_profile("styleadv", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("styleadv")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_source():
    """Eight classes, eight images each, 16x16: enough for 5-way 1-shot, M=2 episodes."""
    return generate_domain(SyntheticDomainSpec(0, "tiny", tuple(range(8)), images_per_class=8, seed=5, size=16))


@pytest.fixture
def tiny_model():
    return StyleAdvModel(n_classes=8, channels=(3, 4, 6, 8), seed=1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
