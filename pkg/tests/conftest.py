import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vo2lgm.dataset import build_frame
from vo2lgm.inference import fit
from vo2lgm.simulate import GenerativeConfig, simulate

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_sim():
    return simulate(GenerativeConfig(n_patients=4, sessions_per_patient=2, breaths_per_session=60, seed=11))


@pytest.fixture(scope="session")
def small_fit(small_sim):
    ds, _ = small_sim
    return fit(build_frame(ds))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(LINES):
            terminalreporter.write_line(LINES[k])
