import numpy as np
import pytest

from magnetohom.fem import LameTensor, build_mesh


@pytest.fixture(scope="session")
def lame():
    return LameTensor(1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def mesh8():
    return build_mesh(8)


@pytest.fixture(scope="session")
def mesh16():
    return build_mesh(16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def bump(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
