import math

import numpy as np
import pytest

from polykin import ellipsoid_geometry as eg
from polykin.collision_core import ellipsoid_matrix, quadratic_form


@pytest.mark.parametrize("ell,d", [(1, 2), (2, 2), (2, 3), (3, 2)])
def test_samples_lie_on_canonical_ellipsoid(ell, d):
    E = eg.BlockEllipsoid.canonical(ell, d)
    x = eg.sample_ellipsoid(E, 1000, np.random.default_rng(0))
    np.testing.assert_allclose(quadratic_form(x), 1.0, atol=1e-12)
    np.testing.assert_allclose(E.form(x), 1.0, atol=1e-12)


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_slot_invariant_maps(ell):
    E = eg.BlockEllipsoid.canonical(ell, 2)
    x = eg.sample_ellipsoid(E, 100, np.random.default_rng(1))
    for i in range(1, ell + 1):
        T = eg.slot_invariant_sphere_map(E, i)
        y = T(x)
        np.testing.assert_allclose(np.sum(y ** 2, axis=(1, 2)), 1.0, atol=1e-12)
        np.testing.assert_allclose(y[:, i - 1], T.scale * x[:, i - 1], atol=1e-13)
        np.testing.assert_allclose(T.inverse(y), x, atol=1e-12)


def test_slot_index_checked():
    with pytest.raises(IndexError):
        eg.slot_invariant_sphere_map(eg.BlockEllipsoid.canonical(2, 2), 3)


def test_block_ellipsoid_validation():
    with pytest.raises(ValueError):
        eg.BlockEllipsoid(2, 2, np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        eg.BlockEllipsoid(2, 2, np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        eg.BlockEllipsoid(2, 2, np.eye(2), c=0.0)


def test_surface_measure_of_unit_sphere():
    E = eg.BlockEllipsoid(1, 3, np.eye(1))
    assert eg.ellipsoid_surface_measure(E) == pytest.approx(4 * math.pi)
    E2 = eg.BlockEllipsoid(1, 3, 4 * np.eye(1))
    assert eg.ellipsoid_surface_measure(E2) == pytest.approx(4 * math.pi / 8)


def test_transformed_ellipsoid_contains_image():
    E = eg.BlockEllipsoid.canonical(2, 2)
    S = np.array([[1.0, 0.5], [0.0, 2.0]])
    F = E.transformed(S)
    x = eg.sample_ellipsoid(E, 50, np.random.default_rng(2))
    Sx = np.einsum("ij,njd->nid", S, x)
    np.testing.assert_allclose(F.form(Sx), 1.0, atol=1e-12)


def test_cap_measure_single_slot_exact():
    # l = 1 in d = 3: omega is uniform on the sphere and |cos| >= alpha has mass 1 - alpha
    E = eg.BlockEllipsoid.canonical(1, 3)
    for alpha in (0.2, 0.7):
        est = eg.estimate_cap(E, alpha, [0, 0, 1], 200_000, seed=3)
        assert abs(est.value - (1 - alpha)) < 5 * est.stderr


def test_cylinder_methods_agree():
    E = eg.BlockEllipsoid.canonical(2, 3)
    a = eg.estimate_cylinder(E, 0.1, 200_000, seed=4)
    b = eg.estimate_cylinder(E, 0.1, 200_000, seed=5, method="indicator")
    assert abs(a.value - b.value) < 5 * math.hypot(a.stderr, b.stderr)


def test_direction_within_matches_sampling():
    rng = np.random.default_rng(6)
    u = eg.sample_sphere(3, 400_000, rng)
    t = 0.3
    frac = np.mean(1 - u[:, 0] ** 2 <= t * t)
    assert float(eg.direction_within(3, t)) == pytest.approx(frac, abs=3e-3)


def test_annulus_rejects_proportional_form_and_scales_linearly():
    E = eg.BlockEllipsoid.canonical(2, 2)
    with pytest.raises(ValueError):
        eg.estimate_annulus(E, 3 * ellipsoid_matrix(2), 0.3, 0.01, 10)
    B = np.diag([1.0, 0.0])
    small = eg.estimate_annulus(E, B, 0.3, 0.005, 400_000, seed=7).value
    big = eg.estimate_annulus(E, B, 0.3, 0.02, 400_000, seed=7).value
    assert big / small == pytest.approx(4.0, rel=0.1)


def test_mc_estimate_merging():
    v = np.random.default_rng(8).random(1000)
    a = eg.McEstimate.from_values(v)
    b = eg.McEstimate.from_sums(v.sum(), (v ** 2).sum(), v.size)
    assert a.value == pytest.approx(b.value)
    assert a.stderr == pytest.approx(b.stderr, rel=1e-10)
    assert a.scaled(-2).stderr == pytest.approx(2 * a.stderr)


def test_fit_loglog_slope():
    x = np.logspace(-3, -1, 5)
    assert eg.fit_loglog_slope(x, 3 * x ** 1.5) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        eg.fit_loglog_slope([1.0], [1.0])
