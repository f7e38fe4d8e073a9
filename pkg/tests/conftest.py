import numpy as np
import pytest

from decapbench import pdn
from decapbench.env import Evaluator

SHORT_GRID = pdn.make_freq_grid(21, 2.0e8, 2.0e10)


@pytest.fixture(scope="session")
def eval3():
    """3x3 chip-only evaluator with a short frequency grid."""
    return Evaluator(pdn.chip_only_config(3, 3, SHORT_GRID))


@pytest.fixture(scope="session")
def eval5():
    """5x5 chip-only evaluator with a short frequency grid."""
    return Evaluator(pdn.chip_only_config(5, 5, SHORT_GRID))


@pytest.fixture(scope="session")
def eval5_full():
    """5x5 chip-only evaluator with the default 201-point grid."""
    return Evaluator(pdn.chip_only_config(5, 5))


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))
