import math

import numpy as np
import pytest

from coeffs import (
    MatrixField,
    RadiiSchedule,
    beta_from_lambda,
    build_field,
    build_weight,
    compact_perturbation,
    conic_eigenframe,
    conic_nd,
    critical_p,
    critical_p_lambda,
    fit_power_law,
    gd_decay,
    identity_field,
    meyer_conic,
    mollifier_rule,
    mollify,
    parse_field_spec,
    partial_conic,
    power_weight,
    quasi_isometry_constant,
    rescale,
    scaled_identity,
    strip_perturbation,
    WeightField,
    weighted_gd_decay,
)


def test_meyer_conic_eigenframe():
    beta = -0.5
    A = meyer_conic(beta)
    x = np.array([0.3, -0.7])
    radial, tangential = conic_eigenframe(A, x)
    assert radial == pytest.approx(1.0)
    np.testing.assert_allclose(tangential, [(1 + beta) ** 2])
    assert A.c_ell == pytest.approx(0.25)
    assert A.C_ell == pytest.approx(1.0)
    np.testing.assert_allclose(A.at([0.0, 0.0]), np.eye(2))


def test_meyer_conic_rejects_degenerate_beta():
    with pytest.raises(ValueError, match="degenerate"):
        meyer_conic(-1.0)


def test_conic_nd_eigenframe_in_3d():
    A = conic_nd(0.3, 3)
    radial, tangential = conic_eigenframe(A, [1.0, 2.0, -0.5])
    assert radial == pytest.approx(1.0)
    np.testing.assert_allclose(tangential, [0.3, 0.3])
    np.testing.assert_allclose(A.at([0.0, 0.0, 0.0]), np.eye(3))


def test_beta_and_critical_exponent():
    # lambda = (1 + beta)^2 recovers beta in the plane
    assert beta_from_lambda(0.25, 2) == pytest.approx(-0.5)
    assert critical_p(-0.5, 2) == pytest.approx(4.0)
    assert critical_p(-0.5, 3, "partial") == pytest.approx(4.0)
    assert critical_p(-0.5, 3, "full") == pytest.approx(6.0)
    assert critical_p_lambda(0.25, 2) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        critical_p(0.2, 2)
    with pytest.raises(ValueError):
        critical_p(-0.5, 2, "sideways")


def test_partial_conic_is_identity_off_the_plane():
    A = partial_conic(-0.5, 3)
    mat = A.at([0.4, -0.2, 5.0])
    assert mat[2, 2] == pytest.approx(1.0)
    np.testing.assert_allclose(mat[2, :2], 0.0)
    np.testing.assert_allclose(A.singular_distance(np.array([[3.0, 4.0, 12.0]])), [5.0])
    assert partial_conic(-0.5, 2).name == meyer_conic(-0.5).name


def test_spot_check_catches_wrong_constants():
    with pytest.raises(ValueError, match="ellipticity"):
        MatrixField(2, lambda x: np.broadcast_to(2.0 * np.eye(2), (x.shape[0], 2, 2)).copy(), 0.5, 1.5)
    with pytest.raises(ValueError, match="symmetric"):
        skew = np.array([[1.0, 0.3], [0.0, 1.0]])
        MatrixField(2, lambda x: np.broadcast_to(skew, (x.shape[0], 2, 2)).copy(), 0.5, 1.5)


def test_field_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        identity_field(2)(np.zeros((4, 3)))


def test_perturbations_switch_on_their_regions():
    I, twice = identity_field(2), scaled_identity(2, 2.0)
    strip = strip_perturbation(I, twice)
    np.testing.assert_allclose(strip.at([5.0, 0.5]), 2.0 * np.eye(2))
    np.testing.assert_allclose(strip.at([5.0, 1.5]), np.eye(2))
    compact = compact_perturbation(I, twice, 1.0)
    np.testing.assert_allclose(compact.at([0.5, 0.5]), 2.0 * np.eye(2))
    np.testing.assert_allclose(compact.at([1.0, 0.0]), np.eye(2))
    with pytest.raises(ValueError):
        compact_perturbation(I, twice, 0.0)


def test_quasi_isometry_constant():
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    assert quasi_isometry_constant(scaled_identity(2, 3.0), identity_field(2), pts) == pytest.approx(3.0)
    assert quasi_isometry_constant(meyer_conic(-0.5), identity_field(2), pts) == pytest.approx(4.0)


def test_mollifier_rule_has_unit_mass_inside_the_ball():
    nodes, weights = mollifier_rule(2)
    assert weights.sum() == pytest.approx(1.0)
    assert np.all(np.linalg.norm(nodes, axis=1) < 1.0)
    # even kernel: zero first moment
    np.testing.assert_allclose(weights @ nodes, 0.0, atol=1e-12)


def test_mollify_keeps_constants_and_ellipticity():
    smooth = mollify(scaled_identity(2, 3.0), 0.5)
    np.testing.assert_allclose(smooth.at([0.2, 0.1]), 3.0 * np.eye(2))
    blurred = mollify(meyer_conic(-0.5), 0.1)
    eig = np.linalg.eigvalsh(blurred(np.random.default_rng(1).uniform(-1, 1, (100, 2))))
    assert eig.min() >= 0.25 - 1e-12
    assert eig.max() <= 1.0 + 1e-12


def test_radii_schedule_validation():
    sched = RadiiSchedule((2.0, 100.0))
    assert sched.disjoint()
    inner, outer, r = sched.annuli()[0]
    assert inner == pytest.approx(math.sqrt(2.0) - 1.0)
    assert outer == pytest.approx(8.0)
    with pytest.raises(ValueError, match="violated"):
        RadiiSchedule((2.0, 50.0))
    with pytest.raises(ValueError, match="r_1 > 1"):
        RadiiSchedule((1.0, 100.0))


def test_rescale_identity_and_composition():
    A = meyer_conic(-0.5)
    assert rescale(A, 1.0) is A
    x = np.array([[0.3, 0.4]])
    np.testing.assert_allclose(rescale(A, 10.0)(x / 10.0), A(x))
    with pytest.raises(ValueError):
        rescale(A, 0.0)


def test_fit_power_law_recovers_exponent():
    t = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    fit = fit_power_law(t, 7.0 * t ** -0.3)
    assert fit.exponent == pytest.approx(0.3)
    assert fit.amplitude == pytest.approx(7.0)
    assert fit.residual == pytest.approx(0.0, abs=1e-12)
    assert fit.growth == pytest.approx(-0.3)


def test_fit_power_law_zero_and_negative_values():
    fit = fit_power_law([1.0, 2.0, 4.0], [0.0, 0.0, 0.0])
    assert fit.infinite_decay
    assert math.isinf(fit.exponent)
    with pytest.raises(ValueError):
        fit_power_law([1.0, 2.0, 4.0], [1.0, 0.0, 0.5])


def test_gd_decay_of_compact_perturbation():
    A = compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 1.0)
    fit = gd_decay(A, identity_field(2), [[0.0, 0.0]], [2.0, 4.0, 8.0], resolution=64)
    assert fit.exponent == pytest.approx(2.0, abs=0.1)
    assert not fit.infinite_decay


def test_gd_decay_identical_fields_is_infinite():
    fit = gd_decay(identity_field(2), identity_field(2), [[0.0, 0.0]], [2.0, 4.0, 8.0], resolution=16)
    assert fit.infinite_decay


def test_gd_decay_is_scale_restricted():
    with pytest.raises(ValueError, match="r > 1"):
        gd_decay(identity_field(2), identity_field(2), [[0.0, 0.0]], [0.5, 2.0, 4.0])
    with pytest.raises(ValueError):
        gd_decay(identity_field(2), identity_field(2), [[0.0, 0.0]], [2.0, 4.0])


def test_weighted_gd_decay_same_weight():
    A = compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 1.0)
    w = power_weight(0.3, 2)
    fits = weighted_gd_decay(A, identity_field(2), w, w, [[0.0, 0.0]], [2.0, 4.0, 8.0], resolution=64)
    assert fits["weight"].infinite_decay
    # |x|^0.3 averages give the doubling dimension 2.3
    assert fits["matrix"].exponent == pytest.approx(2.3, abs=0.15)
    assert fits["joint"].exponent == pytest.approx(fits["matrix"].exponent)


def test_parse_field_spec():
    name, params = parse_field_spec("tiled{base=meyer_conic,beta=-0.5,radii=[2,100],moll=1.0}")
    assert name == "tiled"
    assert params == {"base": "meyer_conic", "beta": -0.5, "radii": [2, 100], "moll": 1.0}
    assert parse_field_spec("identity") == ("identity", {})
    with pytest.raises(ValueError):
        parse_field_spec("conic{beta}")


def test_build_field_names_and_errors():
    A = build_field("meyer_conic{beta=-0.5}", 2)
    assert A.name == "meyer_conic{beta=-0.5}"
    assert A.c_ell == pytest.approx(0.25)
    with pytest.raises(ValueError, match="unknown field id"):
        build_field("nope", 2)
    with pytest.raises(ValueError, match="unused"):
        build_field("identity{c=2}", 2)
    with pytest.raises(ValueError):
        build_field("meyer_conic{beta=-0.5}", 3)


def test_build_weight():
    assert build_weight("unit", 2) is None
    assert build_weight(None, 2) is None
    w = build_weight("power{a=0.3}", 2)
    assert w(np.array([[3.0, 4.0]]))[0] == pytest.approx(5.0 ** 0.3)
    with pytest.raises(ValueError):
        build_weight("power{a=2.5}", 2)


@pytest.mark.parametrize(
    "A",
    [
        compact_perturbation(identity_field(2), scaled_identity(2, 2.0), 1.0),
        strip_perturbation(identity_field(2), scaled_identity(2, 3.0)),
    ],
)
def test_gd_decay_is_symmetric_in_the_two_fields(A):
    centers = [[0.0, 0.0], [1.5, -0.5]]
    forward = gd_decay(A, identity_field(2), centers, [2.0, 4.0, 8.0], resolution=48)
    backward = gd_decay(identity_field(2), A, centers, [2.0, 4.0, 8.0], resolution=48)
    assert backward.exponent == pytest.approx(forward.exponent, rel=1e-12)
    assert backward.amplitude == pytest.approx(forward.amplitude, rel=1e-12)
    assert backward.samples == forward.samples


def _sine_rule(x):
    return 2.0 + np.sin(x[:, 0])


def test_weight_field_checks_declared_comparability_against_samples():
    with pytest.raises(ValueError, match="exceeds declared"):
        WeightField(2, _sine_rule, name="sine", comparability=2.0)
    w = WeightField(2, _sine_rule, name="sine", comparability=3.0)
    assert 2.0 < w.comparability_to() <= 3.0
    with pytest.raises(ValueError, match=">= 1"):
        WeightField(2, _sine_rule, comparability=0.5)


def test_weight_field_comparability_to_a_partner():
    base = WeightField(2, _sine_rule, name="sine")
    double = WeightField(2, lambda x: 2.0 * _sine_rule(x), name="double")
    w = WeightField(2, _sine_rule, comparability=2.0, partner=double)
    assert w.comparability_to(double) == pytest.approx(2.0)
    assert base.comparability_to(base) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="exceeds declared"):
        WeightField(2, _sine_rule, comparability=1.5, partner=double)
