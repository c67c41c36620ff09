import numpy as np
import pytest

from ncsrate.cli import example_plant_doc, plant_from_doc
from ncsrate.lti import PartitionedPlant, RationalTF
from ncsrate.synthesis import SolverOptions, trace_frontier


def first_order_plant(a, gain=1.0):
    """y = gain/(z - a) (u + d), e = y."""
    g = RationalTF([gain], [1.0, -a])
    return PartitionedPlant.from_blocks(g, g, g, g)


@pytest.fixture(scope="session")
def example_plant():
    return plant_from_doc(example_plant_doc())


@pytest.fixture(scope="session")
def example_frontier(example_plant):
    return trace_frontier(example_plant, None, SolverOptions())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = []


def record(number, name, passed, detail):
    """Log one acceptance verdict line and fail the calling test if needed."""
    line = "%s  criterion %2d  %s: %s" % ("PASS" if passed else "FAIL", number, name, detail)
    CRITERIA.append((number, line))
    print(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(CRITERIA):
            terminalreporter.write_line(line)
