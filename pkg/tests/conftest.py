"""Shared fixtures: small bases and models reused across the suite."""

from pathlib import Path

import numpy as np
import pytest

from bsre.coefficients import Bounds, ConstantDiagonal, ScalarRandomField
from bsre.grid import TimeGrid
from bsre.spectral import laplacian_basis

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session")
def configs_dir() -> Path:
    return REPO / "configs"


@pytest.fixture(scope="session")
def basis3():
    return laplacian_basis(3, 0.4)


@pytest.fixture(scope="session")
def basis4():
    return laplacian_basis(4, 0.4)


@pytest.fixture
def grid_short():
    return TimeGrid(0.5, 100)


@pytest.fixture
def const_model(basis3):
    # mild damping, no control channel: pure linear backward equation
    return ConstantDiagonal(
        basis3, c=0.3, b=0.0, s=1.0, m=1.0, bounds=Bounds(0.3, 0.0, 1.0)
    )


@pytest.fixture
def lq_model(basis3):
    return ConstantDiagonal(
        basis3, c=0.3, b=0.5, s=1.0, m=1.0, bounds=Bounds(0.3, 0.5, 1.0)
    )


@pytest.fixture
def field_model(basis3):
    return ScalarRandomField(
        basis3,
        c_field="0.3*cos(w)",
        s_field="1 + 0.2*sin(t)",
        b=0.5 * np.ones(3),
        m=np.ones(3),
        bounds=Bounds(0.3, 0.5, 1.2),
    )
