"""Shared fixtures: grids, circular-law equilibria and small configurations."""

import numpy as np
import pytest

from app.models.fields import Grid2D
from app.models.points import Configuration
from app.services import library
from app.services.equilibrium import equilibrium_from_closed_form, solve_equilibrium
from app.services.sampler import sample_ginibre
from app.core.utils import spawn_rng


@pytest.fixture(scope="session")
def grid64() -> Grid2D:
    return Grid2D.centered(1.5, 64)


@pytest.fixture(scope="session")
def grid128() -> Grid2D:
    return Grid2D.centered(1.5, 128)


@pytest.fixture(scope="session")
def circular_law(grid128):
    """Closed-form equilibrium of V = |x|^2 on the 128 x 128 grid."""
    return equilibrium_from_closed_form(grid128)


@pytest.fixture(scope="session")
def solved_circular_law(grid128):
    return solve_equilibrium(library.quadratic(), grid128)


@pytest.fixture
def rng() -> np.random.Generator:
    return spawn_rng(1234, "tests")


@pytest.fixture(scope="session")
def ginibre16() -> Configuration:
    return sample_ginibre(16, spawn_rng(7, "ginibre-fixture"))


@pytest.fixture(scope="session")
def bump_center():
    return library.get_test_function("bump_center")


@pytest.fixture(scope="session")
def bump_boundary():
    return library.get_test_function("bump_boundary")
