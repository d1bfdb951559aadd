import numpy as np
import pytest

from cc2dv2.data import generate_synthetic


@pytest.fixture(scope="session")
def small_split():
    """Six 64x64 training images and two test images with three landmarks."""
    return generate_synthetic(7, 6, 3, (64, 64), n_test=2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from tests.acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
