import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trigger_erasure.numeric import RandomStream

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return RandomStream.from_seed(1234)


def random_spd(gen: np.random.Generator, d: int) -> np.ndarray:
    a = gen.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
