import math

import numpy as np
import pytest

from polykin.kinetic_types import (CollisionEvent, ImpactParams, ParameterError, PhaseConfig,
                                   SystemParams, in_phase_space, make_scaled_params,
                                   scaled_zone, symmetric_distance, tuple_index_array)


def base_params(**kw):
    doc = dict(d=2, M=2, N=100, eps=(0.001, 0.05), delta=1e-5, R=2.0, rho=4.0)
    doc.update(kw)
    return SystemParams(**doc)


def test_valid_params_roundtrip_json():
    p = base_params().validate()
    q = SystemParams.from_json(p.to_json())
    assert q == p


@pytest.mark.parametrize("kw", [
    dict(d=1), dict(M=0, eps=()), dict(eps=(0.05, 0.001)), dict(eps=(0.001, 1.5)),
    dict(delta=1.0), dict(delta=0.0), dict(R=0.5), dict(rho=1.0), dict(beta0=0.0),
    dict(N=2), dict(eps=(0.001,)),
])
def test_invalid_params_raise(kw):
    with pytest.raises(ParameterError):
        base_params(**kw).validate()


def test_zone_ratio_guard():
    with pytest.raises(ParameterError):
        base_params(eps=(0.01, 0.05)).validate(ratio_max=0.1)
    base_params(eps=(0.01, 0.05)).validate(ratio_max=0.5)


def test_from_dict_rejects_unknown_and_missing():
    doc = base_params().to_dict()
    with pytest.raises(ParameterError):
        SystemParams.from_dict(dict(doc, extra=1))
    doc.pop("R")
    with pytest.raises(ParameterError):
        SystemParams.from_dict(doc)


@pytest.mark.parametrize("scaling,target", [("factorial", None), ("unit", 1.0)])
def test_scaled_zone_solves_scaling_law(scaling, target):
    for d in (2, 3):
        for ell in (1, 2, 3):
            eps = scaled_zone(d, ell, 1000, scaling)
            want = target if target is not None else 1.0 / math.factorial(ell)
            assert 1000 * eps ** (d - 1.0 / ell) == pytest.approx(want, rel=1e-12)


def test_make_scaled_params_orders_zones():
    p = make_scaled_params(2, 2, 10_000, ratio_max=0.5)
    assert p.eps[0] < p.eps[1]
    assert p.delta == pytest.approx(0.01 * p.eps[0])


def test_symmetric_distance_matches_pairwise_sum():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((7, 4, 3))
    direct = np.sqrt(sum(np.sum((pts[:, i] - pts[:, j]) ** 2, axis=1)
                         for i in range(4) for j in range(i + 1, 4)))
    np.testing.assert_allclose(symmetric_distance(pts), direct, rtol=1e-13)


def test_symmetric_distance_two_points_is_euclidean():
    assert symmetric_distance(np.array([[0.0, 0.0], [3.0, 4.0]])) == pytest.approx(5.0)


def test_tuple_index_array_counts():
    assert tuple_index_array(6, 3).shape == (20, 3)
    assert tuple_index_array(2, 3).shape == (0, 3)


def test_in_phase_space_detects_overlap():
    p = base_params().validate()
    far = PhaseConfig([[0, 0], [1, 0], [0, 1]], np.zeros((3, 2)))
    assert in_phase_space(far, p)
    close_pair = PhaseConfig([[0, 0], [0.0005, 0], [0, 1]], np.zeros((3, 2)))
    assert not in_phase_space(close_pair, p)
    # a triple inside the ternary zone although every pair is admissible
    tri = PhaseConfig([[0, 0], [0.02, 0], [0, 0.02]], np.zeros((3, 2)))
    assert not in_phase_space(tri, p)


def test_phase_config_shape_guard_and_energy():
    with pytest.raises(ValueError):
        PhaseConfig(np.zeros((3, 2)), np.zeros((2, 2)))
    Z = PhaseConfig(np.zeros((2, 2)), [[1, 0], [0, 2]])
    assert Z.kinetic_energy() == pytest.approx(2.5)


def test_impact_params_on_ellipsoid():
    ImpactParams(1, [[1.0, 0.0]])
    with pytest.raises(ValueError):
        ImpactParams(1, [[2.0, 0.0]])
    with pytest.raises(ValueError):
        ImpactParams(1, [[1.0, 0.0]], adjoined_velocities=[[1.0, 0.0], [0.0, 1.0]])


def test_collision_event_validation_and_json():
    ev = CollisionEvent(0.5, 3, (0, 2, 5))
    assert '"tuple": [0, 2, 5]' in ev.to_json()
    with pytest.raises(ValueError):
        CollisionEvent(0.5, 2, (0, 1, 2))
    with pytest.raises(ValueError):
        CollisionEvent(0.5, 2, (0, 1), kind="bogus")
