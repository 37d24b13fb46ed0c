import os
import sys

import numpy as np
import pytest

# --- PATH SETUP ---
# modules live in the repository root
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from coeffs import identity_field, meyer_conic  # noqa: E402
from discretize import assemble  # noqa: E402
from grid import Grid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    # 15 x 15 interior nodes
    return Grid(2, 1.0, 0.125)


@pytest.fixture
def laplacian(small_grid):
    return assemble(small_grid, identity_field(2))


@pytest.fixture
def conic_op(small_grid):
    return assemble(small_grid, meyer_conic(-0.5))
