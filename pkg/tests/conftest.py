import numpy as np
import pytest

from vfl_lab.data import generate_synthetic, minmax_normalize, partition_vertical
from vfl_lab.nn_core import SgdConfig
from vfl_lab.protocol import new_session


@pytest.fixture(scope="session")
def small_data():
    """A 4-participant, 5-class problem small enough for sub-second training."""
    ds = minmax_normalize(generate_synthetic(5, 20, 600, 200, 100, separation=0.8, seed=3))
    return partition_vertical(ds, 4, (0.6, 0.2667, 0.1333), seed=1)


@pytest.fixture
def small_session(small_data):
    return new_session(small_data.spec.widths(), 4, 5, (8, 8), (16,), SgdConfig(0.1, 32), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from benchmark import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
