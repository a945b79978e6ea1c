"""Shared fixtures: a small 1-D laboratory reused across the test modules."""

import numpy as np
import pytest

from stochheat import (CoefficientField, TimeMesh, build_grid, build_tree,
                       solve_forward)


@pytest.fixture(scope="session")
def grid():
    return build_grid([(0.0, 1.0)], (31,))


@pytest.fixture(scope="session")
def mesh():
    return TimeMesh(horizon=0.5, steps=8)


@pytest.fixture(scope="session")
def tree(mesh):
    return build_tree(mesh)


@pytest.fixture(scope="session")
def coeffs(grid, mesh):
    return CoefficientField.constant(grid, mesh, a=0.3, b=0.4)


@pytest.fixture(scope="session")
def y0(grid):
    x = grid.coords[:, 0]
    return np.sin(np.pi * x) * (1.0 + 0.5 * np.sin(2 * np.pi * x))


@pytest.fixture(scope="session")
def tree_ensemble(y0, coeffs, tree, mesh, grid):
    return solve_forward(y0, coeffs, tree, mesh, grid)
