import numpy as np
import pytest
from hypothesis import settings

from mgmoe import tensor as T

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _double_precision():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, lines in sorted(LINES, key=lambda x: x[0]):
            for line in lines:
                terminalreporter.write_line(line)
