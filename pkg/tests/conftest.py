"""Shared fixtures: prepared maps and default parameters."""

import numpy as np
import pytest

from patrol3d import Params, synthetic


@pytest.fixture(scope="session")
def params():
    return Params()


@pytest.fixture(scope="session")
def flat_map(params):
    m = synthetic.flat_grid(20.0, 20.0, 0.5)
    m.prepare(eps_neigh=params.eps_neigh, neighbor_radius=params.max_step)
    return m


@pytest.fixture(scope="session")
def corridor_map(params):
    """Rectangular room 14 x 4 m with walls, 0.25 m grid."""
    poly = synthetic.corridor_polygon(14.0, 4.0)
    m = synthetic.polygon_map(poly, spacing=0.25, wall_spacing=0.25)
    m.prepare(eps_neigh=params.eps_neigh, neighbor_radius=params.max_step)
    return m


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
