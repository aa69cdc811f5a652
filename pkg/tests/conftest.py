import math

import numpy as np
import pytest

from services.channel_core import bsc, example1, example2, make_dmc, zchannel
from services.load_curves import get_capacity_curve, get_divergence_curve

ALPHA = 0.1


def binary_entropy(a: float) -> float:
    if a in (0.0, 1.0):
        return 0.0
    return -a * math.log(a) - (1 - a) * math.log(1 - a)


C_BSC = math.log(2) - binary_entropy(ALPHA)
D0 = 0.5 * math.log(1 / (4 * ALPHA * (1 - ALPHA)))
D1 = (1 - 2 * ALPHA) * math.log((1 - ALPHA) / ALPHA)


def random_channel(rng: np.random.Generator):
    n_in = int(rng.integers(2, 7))
    n_out = int(rng.integers(2, 5))
    transition = rng.dirichlet(np.ones(n_out), size=n_in)
    costs = rng.uniform(0.0, 3.0, size=n_in)
    costs[rng.integers(n_in)] = 0.0
    return make_dmc(transition, costs)


@pytest.fixture(scope="session")
def ex1():
    return example1(ALPHA)


@pytest.fixture(scope="session")
def ex1_caps(ex1):
    return get_capacity_curve(ex1)


@pytest.fixture(scope="session")
def ex1_divs(ex1):
    return get_divergence_curve(ex1)


@pytest.fixture(scope="session")
def ex2():
    return example2()


@pytest.fixture(scope="session")
def ex2_caps(ex2):
    return get_capacity_curve(ex2)


@pytest.fixture(scope="session")
def ex2_divs(ex2):
    return get_divergence_curve(ex2)


@pytest.fixture(scope="session")
def bsc_channel():
    return bsc(ALPHA)


@pytest.fixture(scope="session")
def zch():
    return zchannel(ALPHA)


@pytest.fixture(scope="session")
def zch_caps(zch):
    return get_capacity_curve(zch)
