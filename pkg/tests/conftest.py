import numpy as np
import pytest

from invasionfct import build_uniform_mesh


@pytest.fixture(scope="session")
def unit_mesh():
    return build_uniform_mesh(((0.0, 0.0), (1.0, 1.0)), 0)


@pytest.fixture(scope="session")
def mesh_r2():
    return build_uniform_mesh(((0.0, 0.0), (20.0, 20.0)), 2)


@pytest.fixture(scope="session")
def mesh_r3():
    return build_uniform_mesh(((0.0, 0.0), (20.0, 20.0)), 3)


@pytest.fixture(scope="session")
def mesh_r5():
    return build_uniform_mesh(((0.0, 0.0), (20.0, 20.0)), 5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
