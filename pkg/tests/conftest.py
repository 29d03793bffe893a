import pytest

from he_backend import BACKEND_NOISE_SIM, BACKEND_TOY_CKKS, BackendParams, NoiseBounds, make_backend
from mdp_core import GridWorldSpec, build_grid_world
from rerl_core import LinearSystem, build_linear_system

# 8 slots: enough for every canonical layout up to S=7
SMALL_RING = 16


@pytest.fixture
def small_params():
    return BackendParams(ring_degree=SMALL_RING, scale_bits=28, seed=7)


@pytest.fixture
def noise_sim(small_params):
    backend = make_backend(small_params, BACKEND_NOISE_SIM)
    return backend, backend.keygen()


@pytest.fixture
def exact_sim(small_params):
    backend = make_backend(small_params, BACKEND_NOISE_SIM, NoiseBounds.zero())
    return backend, backend.keygen()


@pytest.fixture(scope='session')
def toy():
    backend = make_backend(BackendParams(ring_degree=SMALL_RING, scale_bits=28, seed=7), BACKEND_TOY_CKKS)
    return backend, backend.keygen()


@pytest.fixture
def square_grid():
    """2x2 grid, goal in the top-left corner (S=3)."""
    return GridWorldSpec(width=2, height=2, goal_cell=(0, 0))


@pytest.fixture
def square_system(square_grid):
    return build_linear_system(build_grid_world(square_grid), 10.0)


@pytest.fixture
def two_state_system():
    return LinearSystem([[0.2, 0.3], [0.1, 0.4]], [0.1, 0.2], lam=1.0)
