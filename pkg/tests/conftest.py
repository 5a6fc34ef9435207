import numpy as np
import pytest

from minjump.benchmarks import (
    bench3_model,
    oscillator_kernel,
    pure_birth_kernel,
    two_state_kernel,
    zero_kernel,
)


@pytest.fixture(scope="session")
def two_state():
    return two_state_kernel(1.0, 2.0)


@pytest.fixture(scope="session")
def osc6():
    return oscillator_kernel(6)


@pytest.fixture(scope="session")
def osc20():
    return oscillator_kernel(20)


@pytest.fixture(scope="session")
def birth40():
    return pure_birth_kernel(2.0, 40)


@pytest.fixture(scope="session")
def zero3():
    return zero_kernel(3)


@pytest.fixture(scope="session")
def bench3():
    return bench3_model()


@pytest.fixture()
def point_mass():
    def make(space, label_or_index=0):
        g = np.zeros(space.n_states)
        idx = (
            space.index(label_or_index)
            if isinstance(label_or_index, str)
            else label_or_index
        )
        g[idx] = 1.0
        return g

    return make
