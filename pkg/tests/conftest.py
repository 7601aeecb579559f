import numpy as np
import pytest

from cefc.controller import ControlLimits
from cefc.gridsim import default_grid
from cefc.koopman import fit, generate_dataset, method_config


@pytest.fixture(scope="session")
def grid():
    return default_grid()


@pytest.fixture(scope="session")
def dataset_small(grid):
    """Shared reduced dataset: big enough for a usable fit, small enough to share."""
    return generate_dataset(grid, 40, 15, seed=11)


@pytest.fixture(scope="session")
def cefc_model(grid, dataset_small):
    return fit(dataset_small, method_config("cefc", dt=dataset_small.train[0].dt))


@pytest.fixture(scope="session")
def limits(grid):
    return ControlLimits.for_grid(grid)


@pytest.fixture(scope="session")
def node_base(grid):
    return np.array([ld.base_power for ld in grid.loads])
