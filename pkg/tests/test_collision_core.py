import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polykin import collision_core as cc
from polykin.ellipsoid_geometry import BlockEllipsoid, sample_ellipsoid


def sample(ell, d, n, seed):
    rng = np.random.default_rng(seed)
    omega = sample_ellipsoid(BlockEllipsoid.canonical(ell, d), n, rng)
    V = rng.standard_normal((n, ell + 1, d))
    return omega, V


def test_ellipsoid_matrix_values():
    np.testing.assert_array_equal(cc.ellipsoid_matrix(1), [[1.0]])
    np.testing.assert_array_equal(cc.ellipsoid_matrix(2), [[2, -1], [-1, 2]])


def test_quadratic_form_definition():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((5, 3, 2))
    direct = 4 * np.sum(w ** 2, axis=(1, 2)) - np.sum(w.sum(axis=1) ** 2, axis=1)
    np.testing.assert_allclose(cc.quadratic_form(w), direct, rtol=1e-13)


@settings(max_examples=60, deadline=None)
@given(ell=st.integers(1, 3), d=st.integers(2, 3), seed=st.integers(0, 2 ** 32 - 1))
def test_conservation_laws(ell, d, seed):
    omega, V = sample(ell, d, 50, seed)
    post = cc.collide(omega, V)
    np.testing.assert_allclose(post.sum(1), V.sum(1), atol=1e-12)
    np.testing.assert_allclose(np.sum(post ** 2, axis=(1, 2)), np.sum(V ** 2, axis=(1, 2)),
                               rtol=1e-12)
    np.testing.assert_allclose(cc.relative_speed(post), cc.relative_speed(V), rtol=1e-12)
    np.testing.assert_allclose(cc.collide(omega, post), V, atol=1e-12)


def test_collision_flips_cross_section_sign():
    omega, V = sample(2, 3, 200, 3)
    post = cc.collide(omega, V)
    b = cc.cross_section(omega, cc.relative_velocities(V))
    b_post = cc.cross_section(omega, cc.relative_velocities(post))
    np.testing.assert_allclose(b_post, -b, atol=1e-12)


def test_binary_collision_is_classical_reflection():
    rng = np.random.default_rng(4)
    n = rng.standard_normal((100, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    V = rng.standard_normal((100, 2, 3))
    proj = np.sum((V[:, 1] - V[:, 0]) * n, axis=1)[:, None]
    post = cc.collide(n[:, None, :], V)
    np.testing.assert_allclose(post[:, 0], V[:, 0] + proj * n, atol=1e-14)
    np.testing.assert_allclose(post[:, 1], V[:, 1] - proj * n, atol=1e-14)


def test_collide_rejects_off_ellipsoid_and_bad_shapes():
    with pytest.raises(ValueError):
        cc.collide(np.array([[2.0, 0.0]]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        cc.collide(np.array([[1.0, 0.0]]), np.zeros((3, 2)))


def test_classification():
    omega = np.array([[1.0, 0.0]])
    assert cc.classify(omega, np.array([[1.0, 0.0], [-1.0, 0.0]])) == "pre"
    assert cc.classify(omega, np.array([[-1.0, 0.0], [1.0, 0.0]])) == "post"
    assert cc.classify(omega, np.array([[0.0, 1.0], [0.0, -1.0]])) == "grazing"


def test_transition_map_properties():
    omega, V = sample(2, 2, 300, 5)
    b = cc.cross_section(omega, cc.relative_velocities(V))
    omega = np.where((b < 0)[:, None, None], -omega, omega)
    nu = cc.transition_raw(V, omega)
    np.testing.assert_allclose(cc.quadratic_form(nu), 1.0, atol=1e-12)
    for i in range(20):
        out = cc.transition_map(V[i], omega[i])
        np.testing.assert_allclose(cc.transition_inverse(out.nu, V[i]), omega[i], atol=1e-10)
        assert out.jacobian > 0


def test_transition_jacobian_matches_finite_differences():
    omega, V = sample(3, 2, 50, 6)
    b = cc.cross_section(omega, cc.relative_velocities(V))
    omega = np.where((b < 0)[:, None, None], -omega, omega)
    n = 6
    basis = np.eye(n).reshape(n, 3, 2)
    h = 1e-3
    jac = (cc.transition_raw(V[:, None], omega[:, None] + h * basis)
           - cc.transition_raw(V[:, None], omega[:, None] - h * basis)) / (2 * h)
    det = np.abs(np.linalg.det(jac.reshape(50, n, n)))
    np.testing.assert_allclose(det, cc.transition_jacobian(V, omega), rtol=1e-6)


def test_transition_map_domain_errors():
    V = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(ValueError):
        cc.transition_map(V, np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        cc.transition_map(np.zeros((2, 2)), np.array([[1.0, 0.0]]))


def test_frame_maps():
    S1 = cc.frame_map_matrix(2, 1)
    np.testing.assert_array_equal(S1, [[1, 1], [0, 1]])
    S3 = cc.frame_map_matrix(2, 3)
    np.testing.assert_array_equal(S3, [[1, 0], [1, -2]])
    f = cc.adjunction_frame_maps(2, 2, d=3)
    x = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_allclose(f(x).ravel(), f.matrix @ x.ravel())
    with pytest.raises(IndexError):
        cc.frame_map_matrix(2, 4)
