import numpy as np
import pytest

from dpgreedy.data import Dataset

CRITERIA_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(points, weights=None):
    return Dataset(np.atleast_2d(np.asarray(points, dtype=np.float64)), weights)
