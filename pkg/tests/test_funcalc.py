import math

import numpy as np
import pytest

from coeffs import compact_perturbation, identity_field, power_weight, scaled_identity
from discretize import apply_coefficient, assemble, dense_spectral, energy, gradient
from funcalc import (
    SolverConfig,
    SolverError,
    euler_steps,
    heat,
    inv_sqrt,
    inv_sqrt_resolvent,
    local_riesz,
    resolvent,
    resolvent_adjoint,
    resolvent_diff_grad,
    riesz,
    solver_iterations,
    split_difference,
    sqrt_quadrature,
)
from grid import Grid, GridFunction

CG = SolverConfig(prefer_dense=False)


def _eigenpair(op, k=3):
    spec = dense_spectral(op)
    return spec.eigenvalues[k], GridFunction(op.grid, spec.vectors[:, k])


def test_resolvent_on_eigenvector(conic_op):
    lam, phi = _eigenpair(conic_op)
    for cfg in (SolverConfig(), CG):
        u = resolvent(conic_op, 2.0, 0.5, phi, cfg)
        np.testing.assert_allclose(u.values, phi.values / (2.0 + 0.5 * lam), rtol=1e-7, atol=1e-9)


def test_resolvent_argument_checks(conic_op):
    f = GridFunction(conic_op.grid, np.ones(conic_op.size))
    with pytest.raises(ValueError):
        resolvent(conic_op, 0.0, 1.0, f)
    with pytest.raises(ValueError):
        resolvent(conic_op, 1.0, -1.0, f)
    np.testing.assert_allclose(resolvent(conic_op, 2.0, 0.0, f).values, 0.5)


def test_cg_records_iterations(small_grid):
    op = assemble(small_grid, identity_field(2))
    f = GridFunction(small_grid, np.ones(small_grid.size))
    resolvent(op, 1.0, 1.0, f, CG)
    assert solver_iterations(op) > 0


def test_cg_failure_raises_solver_error(conic_op):
    f = GridFunction(conic_op.grid, np.random.default_rng(0).standard_normal(conic_op.size))
    cfg = SolverConfig(prefer_dense=False, max_iter=1, cg_tol=1e-14)
    with pytest.raises(SolverError) as info:
        resolvent(conic_op, 1.0, 10.0, f, cfg)
    assert info.value.iterations >= 1
    assert info.value.residual > cfg.cg_tol


def test_resolvent_adjoint_in_weighted_pairing(small_grid, rng):
    op = assemble(small_grid, identity_field(2), power_weight(0.3, 2))
    other = assemble(small_grid, identity_field(2)).mass
    f = GridFunction(small_grid, rng.standard_normal(small_grid.size))
    g = GridFunction(small_grid, rng.standard_normal(small_grid.size))
    lhs = np.sum(other * resolvent(op, 1.0, 2.0, f).values * g.values)
    rhs = np.sum(other * f.values * resolvent_adjoint(op, 1.0, 2.0, g, other).values)
    assert lhs == pytest.approx(rhs, rel=1e-9)


def test_heat_dense_and_euler_agree(conic_op):
    f = GridFunction(conic_op.grid, np.random.default_rng(2).standard_normal(conic_op.size))
    exact = heat(conic_op, 0.05, f).values
    stepped = heat(conic_op, 0.05, f, SolverConfig(prefer_dense=False, heat_target=1e-3)).values
    assert np.linalg.norm(stepped - exact) <= 2e-3 * np.linalg.norm(f.values)
    assert heat(conic_op, 0.0, f) is f


def test_heat_preserves_mass_for_m_matrix(laplacian):
    # interior point source far from the boundary for a short time
    grid = laplacian.grid
    delta = np.zeros(grid.size)
    j = grid.nearest_node([0.0, 0.0])
    delta[j] = 1.0 / laplacian.mass[j]
    k = heat(laplacian, 0.005, GridFunction(grid, delta)).values
    assert k.min() >= -1e-12
    assert np.sum(laplacian.mass * k) == pytest.approx(1.0, abs=1e-3)


def test_euler_steps_power_of_two():
    m = euler_steps(1.0, 1e4, 1.0, 1e-3, 4096)
    assert m & (m - 1) == 0
    with pytest.raises(SolverError):
        euler_steps(1.0, 1e4, 1.0, 1e-12, 4)


def test_sqrt_quadrature_scalar_accuracy():
    rule = sqrt_quadrature(1.0, 1e4, cfg=SolverConfig(quad_target=1e-8))
    x = np.geomspace(1.0, 1e4, 50)
    np.testing.assert_allclose(rule.scalar(x), x ** -0.5, rtol=1e-7)
    assert rule.error <= 1e-8
    with pytest.raises(ValueError):
        sqrt_quadrature(0.0, 1.0)


def test_inv_sqrt_quadrature_matches_oracle(conic_op, rng):
    spec = dense_spectral(conic_op)
    for _ in range(3):
        f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
        exact = inv_sqrt(conic_op, f).values
        coeffs = spec.vectors.T @ (conic_op.mass * f.values)
        np.testing.assert_allclose(exact, spec.vectors @ (coeffs / np.sqrt(spec.eigenvalues)), atol=1e-10)
        quad = inv_sqrt(conic_op, f, 0.0, CG).values
        assert conic_op.norm(quad - exact) <= 1e-5 * conic_op.norm(f.values)


def test_inv_sqrt_shifted_quadrature(conic_op, rng):
    f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
    exact = inv_sqrt(conic_op, f, 1.0).values
    quad = inv_sqrt(conic_op, f, 1.0, CG).values
    assert conic_op.norm(quad - exact) <= 1e-5 * conic_op.norm(f.values)


def test_energy_isometry(conic_op, rng):
    for _ in range(5):
        f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
        u = inv_sqrt(conic_op, f)
        assert energy(conic_op, u) == pytest.approx(conic_op.inner(f.values, f.values), rel=1e-8)


def test_inv_sqrt_resolvent_on_eigenvector(conic_op):
    lam, phi = _eigenpair(conic_op, 5)
    t = 3.0
    u = inv_sqrt_resolvent(conic_op, t, phi)
    np.testing.assert_allclose(u.values, phi.values / math.sqrt(1.0 + t * lam), rtol=1e-8, atol=1e-10)


def test_riesz_and_local_riesz(conic_op, rng):
    f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
    R = riesz(conic_op, f)
    np.testing.assert_allclose(R.values, gradient(conic_op, inv_sqrt(conic_op, f)).values)
    local = local_riesz(conic_op, f)
    np.testing.assert_allclose(local.values, gradient(conic_op, inv_sqrt(conic_op, f, 1.0)).values)


@pytest.fixture
def perturbed_pair(small_grid):
    opL = assemble(small_grid, compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 0.5))
    opL0 = assemble(small_grid, identity_field(2))
    return opL, opL0


@pytest.mark.parametrize("cfg", [SolverConfig(), CG])
def test_resolvent_difference_identity(perturbed_pair, rng, cfg):
    opL, opL0 = perturbed_pair
    f = GridFunction(opL.grid, rng.standard_normal(opL.size))
    for t in (0.5, 4.0, 32.0):
        out = resolvent_diff_grad(opL, opL0, t, f, cfg).values
        u0 = resolvent(opL0, 1.0, t, f, cfg).values
        u = resolvent(opL, 1.0, t, f, cfg).values
        direct = gradient(opL, GridFunction(opL.grid, u0 - u)).values
        assert np.linalg.norm(out - direct) <= 1e-4 * np.linalg.norm(direct)


def test_resolvent_difference_vanishes_for_equal_operators(laplacian, rng):
    f = GridFunction(laplacian.grid, rng.standard_normal(laplacian.size))
    out = resolvent_diff_grad(laplacian, laplacian, 2.0, f)
    np.testing.assert_allclose(out.values, 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        resolvent_diff_grad(laplacian, laplacian, 0.0, f)


def test_resolvent_difference_rejects_different_grids(laplacian):
    other = assemble(Grid(2, 1.0, 0.25), identity_field(2))
    f = GridFunction(laplacian.grid, np.ones(laplacian.size))
    with pytest.raises(ValueError, match="different grids"):
        resolvent_diff_grad(laplacian, other, 1.0, f)


def test_split_difference_sums_to_operator_difference(small_grid, rng):
    w = power_weight(0.3, 2)
    opL = assemble(small_grid, compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 0.5), w)
    opL0 = assemble(small_grid, identity_field(2))
    for _ in range(10):
        f = GridFunction(small_grid, rng.standard_normal(small_grid.size))
        first, second = split_difference(opL, opL0, f)
        target = opL0.apply(f.values) - opL.apply(f.values)
        np.testing.assert_allclose(first.values + second.values, target, rtol=1e-9, atol=1e-9 * np.abs(target).max())


def test_split_difference_weight_piece_vanishes_for_equal_weights(perturbed_pair, rng):
    opL, opL0 = perturbed_pair
    f = GridFunction(opL.grid, rng.standard_normal(opL.size))
    _, second = split_difference(opL, opL0, f)
    np.testing.assert_array_equal(second.values, 0.0)


def _energy_of_field(op, V):
    AV = apply_coefficient(op, V)
    return float(np.sum(V.measure * np.einsum("qi,qi->q", AV.values, V.values)))


@pytest.mark.parametrize("weighted", [False, True])
def test_riesz_transform_is_an_isometry(small_grid, conic_op, rng, weighted):
    op = assemble(small_grid, conic_op.field, power_weight(0.3, 2)) if weighted else conic_op
    for _ in range(5):
        f = GridFunction(op.grid, rng.standard_normal(op.size))
        R = riesz(op, f)
        assert _energy_of_field(op, R) == pytest.approx(op.inner(f.values, f.values), rel=1e-8)


def test_local_riesz_is_a_contraction(conic_op, rng):
    for _ in range(5):
        f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
        R = local_riesz(conic_op, f)
        assert _energy_of_field(conic_op, R) <= conic_op.inner(f.values, f.values) * (1 + 1e-10)


@pytest.mark.parametrize("cfg", [SolverConfig(), CG])
def test_resolvent_is_a_contraction(conic_op, rng, cfg):
    for t in (1.0, 10.0, 100.0):
        for _ in range(20):
            f = rng.standard_normal(conic_op.size)
            u = resolvent(conic_op, 1.0, t, GridFunction(conic_op.grid, f), cfg).values
            assert conic_op.norm(u) <= conic_op.norm(f) * (1 + 1e-8)


def test_resolvent_is_a_sup_norm_contraction_for_m_matrix(laplacian, rng):
    assert laplacian.is_m_matrix
    for _ in range(20):
        f = rng.standard_normal(laplacian.size)
        u = resolvent(laplacian, 1.0, 10.0, GridFunction(laplacian.grid, f)).values
        assert np.abs(u).max() <= np.abs(f).max() * (1 + 1e-10)


def test_heat_semigroup_property(conic_op, rng):
    f = GridFunction(conic_op.grid, rng.standard_normal(conic_op.size))
    for s, t in ((0.01, 0.02), (0.1, 0.3)):
        joint = heat(conic_op, s + t, f).values
        composed = heat(conic_op, s, heat(conic_op, t, f)).values
        assert conic_op.norm(joint - composed) <= 1e-10 * conic_op.norm(f.values)


def test_heat_kernel_of_laplacian_matches_gaussian():
    grid = Grid(2, 1.5, 1.0 / 16)
    op = assemble(grid, identity_field(2))
    t = 0.1
    j = grid.nearest_node([0.0, 0.0])
    delta = np.zeros(grid.size)
    delta[j] = 1.0 / op.mass[j]
    k = heat(op, t, GridFunction(grid, delta)).values
    x = grid.coords()
    d2 = np.sum((x - x[j]) ** 2, axis=1)
    near = d2 <= 9.0 * t
    gauss = np.exp(-d2[near] / (4.0 * t)) / (4.0 * math.pi * t)
    assert np.max(np.abs(k[near] / gauss - 1.0)) <= 0.05
