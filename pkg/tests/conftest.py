import math

import numpy as np
import pytest

from spice_uq.netmodel import Branch, Bus, Generator, Load, Network, load_case


def two_bus(p_load=0.1, q_load=0.0, x=0.1, n_gen=1, s_max=1.0):
    """Slack at 1 pu feeding one PQ load over a lossless reactance."""
    buses = [Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)]
    gens = [Generator(1, p_load / n_gen, 1.0, 0.0, 2.0, -2.0, 2.0, cost=(0.1, 1.0, 0.0))
            for _ in range(n_gen)]
    return Network(buses, [Branch(1, 2, 0.0, x, s_max=s_max)], gens, [Load(2, p_load, q_load)],
                   name="two_bus")


def two_bus_voltage(p_load, b=10.0):
    """Closed-form PQ-bus voltage of :func:`two_bus` with zero reactive load."""
    f = -p_load / b
    e = (1.0 + math.sqrt(1.0 - 4.0 * f * f)) / 2.0
    return e, f


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
