import math

import numpy as np
import pytest

from coeffs import power_weight
from grid import (
    Grid,
    GridFunction,
    VectorGridFunction,
    ball_average,
    ball_mask,
    bump,
    load_grid_function,
    lp_norm,
    measure_profile,
    sample,
    save_grid_function,
)


def test_grid_geometry():
    g = Grid(2, 1.0, 0.25)
    assert g.nodes_per_axis == 9
    assert g.shape == (7, 7)
    assert g.size == 49
    coords = g.coords()
    assert coords.shape == (49, 2)
    np.testing.assert_allclose(coords[0], [-0.75, -0.75])
    np.testing.assert_allclose(coords[-1], [0.75, 0.75])
    # row-major, axis 0 slowest
    np.testing.assert_allclose(coords[1], [-0.75, -0.5])


@pytest.mark.parametrize("n, L, h", [(1, 1.0, 0.25), (2, 1.0, 0.3), (2, 1.0, 0.0), (4, 1.0, 0.5)])
def test_grid_rejects_bad_shapes(n, L, h):
    with pytest.raises(ValueError):
        Grid(n, L, h)


def test_nearest_node_and_boundary_distance():
    g = Grid(2, 1.0, 0.25)
    j = g.nearest_node([0.0, 0.0])
    np.testing.assert_allclose(g.coords()[j], [0.0, 0.0])
    assert g.distance_to_boundary().min() == pytest.approx(0.25)


def test_grid_function_validates():
    g = Grid(2, 1.0, 0.5)
    with pytest.raises(ValueError):
        GridFunction(g, np.ones(3))
    with pytest.raises(ValueError):
        GridFunction(g, np.full(g.size, np.nan))
    with pytest.raises(ValueError):
        VectorGridFunction(g, np.ones((g.size, 3)))


def test_ball_mask_is_strict():
    g = Grid(2, 1.0, 0.5)
    # the four axis neighbours of the origin sit at distance exactly 0.5
    assert ball_mask(g, [0.0, 0.0], 0.5).sum() == 1
    assert ball_mask(g, [0.0, 0.0], 0.5 + 1e-9).sum() == 5


def test_ball_average_of_constant_and_empty_ball():
    g = Grid(2, 1.0, 0.125)
    f = GridFunction(g, np.full(g.size, 3.0))
    assert ball_average(f, [0.1, -0.2], 0.4) == pytest.approx(3.0)
    with pytest.raises(ValueError, match="empty ball"):
        ball_average(f, [0.0625, 0.0625], 0.01)


def test_lp_norm_of_constant_and_vector_fields():
    g = Grid(2, 1.0, 0.125)
    f = GridFunction(g, np.ones(g.size))
    area = g.size * g.cell_volume
    assert lp_norm(f, 2.0) == pytest.approx(math.sqrt(area))
    assert lp_norm(f, math.inf) == 1.0

    V = VectorGridFunction(g, np.tile([3.0, 4.0], (g.size, 1)))
    assert lp_norm(V, 1.0) == pytest.approx(5.0 * area)
    with pytest.raises(ValueError):
        lp_norm(f, 0.5)


def test_lp_norm_large_p_does_not_overflow():
    g = Grid(2, 1.0, 0.125)
    f = GridFunction(g, np.full(g.size, 1e200))
    assert math.isfinite(lp_norm(f, 8.0))


def test_measure_profile_unit_weight_is_two_dimensional():
    g = Grid(2, 4.0, 0.0625)
    prof = measure_profile(g, None, [[0.0, 0.0], [0.5, -0.5]], [0.5, 1.0, 2.0])
    assert prof.pooled == pytest.approx(2.0, abs=0.05)
    assert prof.doubling == pytest.approx(4.0, rel=0.1)


def test_measure_profile_power_weight_adds_exponent():
    g = Grid(2, 4.0, 0.0625)
    w = power_weight(0.5, 2)
    prof = measure_profile(g, w, [[0.0, 0.0]], [0.5, 1.0, 2.0])
    assert prof.pooled == pytest.approx(2.5, abs=0.1)


def test_bump_is_never_zero():
    g = Grid(2, 1.0, 0.25)
    tiny = bump(g, [0.0, 0.0], 1e-6)
    assert tiny.values.sum() == 1.0
    wide = bump(g, [0.0, 0.0], 0.5)
    assert wide.values.max() == pytest.approx(1.0)


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_grid_function_files_preserve_values(tmp_path, suffix):
    g = Grid(2, 1.0, 0.25)
    f = sample(g, lambda x: np.sin(x[:, 0]) + x[:, 1] ** 3 / 7.0)
    path = save_grid_function(tmp_path / f"f{suffix}", f)
    back = load_grid_function(path)
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)


def test_binary_file_rejects_foreign_header(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"XXXX" + bytes(64))
    with pytest.raises(ValueError):
        load_grid_function(path)


def test_vector_field_at_sample_points_uses_its_own_measure():
    g = Grid(2, 1.0, 0.5)
    pts = np.array([[0.0, 0.0], [0.25, 0.25], [-0.5, 0.5]])
    V = VectorGridFunction(g, np.tile([3.0, 4.0], (3, 1)), points=pts, measure=np.array([0.5, 0.25, 0.25]))
    assert not V.at_nodes
    assert lp_norm(V, 2.0) == pytest.approx(5.0)
    with pytest.raises(ValueError, match="own measure"):
        lp_norm(V, 2.0, np.ones(g.size))
    with pytest.raises(ValueError, match="come together"):
        VectorGridFunction(g, np.zeros((3, 2)), points=pts)
    with pytest.raises(ValueError):
        VectorGridFunction(g, np.zeros((3, 2)), points=pts, measure=np.ones(2))


@pytest.mark.parametrize("p", [1.0, 2.0, 3.5, math.inf])
def test_lp_norm_triangle_inequality(p):
    rng = np.random.default_rng(7)
    g = Grid(2, 1.0, 0.125)
    w = power_weight(0.3, 2)
    for _ in range(20):
        f = GridFunction(g, rng.standard_normal(g.size))
        k = GridFunction(g, rng.standard_normal(g.size))
        total = lp_norm(GridFunction(g, f.values + k.values), p, w)
        assert total <= lp_norm(f, p, w) + lp_norm(k, p, w) + 1e-12


def test_ball_average_is_invariant_under_lattice_shifts():
    g = Grid(2, 2.0, 0.125)
    shift = np.array([0.25, -0.375])

    def profile(x):
        return np.sin(3.0 * x[:, 0]) + x[:, 1] ** 2

    f = sample(g, profile)
    moved = sample(g, lambda x: profile(x - shift))
    for center in ([0.0, 0.0], [-0.5, 0.25], [0.3, 0.1]):
        c = np.asarray(center)
        assert ball_average(moved, c + shift, 0.7) == pytest.approx(
            ball_average(f, c, 0.7), rel=1e-12, abs=1e-12
        )
