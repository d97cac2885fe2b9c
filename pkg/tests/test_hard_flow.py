import itertools
import math

import numpy as np
import pytest
from scipy.optimize import brentq

from polykin import hard_flow as hf
from polykin.kinetic_types import PhaseConfig, SystemParams, in_phase_space, symmetric_distance


def params(M=2, eps=(0.05, 0.2), R=3.0, rho=5.0, d=2):
    return SystemParams(d=d, M=M, N=100, eps=eps, delta=1e-4, R=R, rho=rho).validate(ratio_max=1.0)


def brute_force_first_event(Z, p, t_max, steps=1500):
    """Scan every tuple's distance on a grid and refine the first crossing by root finding."""
    best = (math.inf, None)
    grid = np.linspace(0.0, t_max, steps + 1)
    for ell in range(1, min(Z.m - 1, p.M) + 1):
        eps = p.zone(ell)
        for tup in itertools.combinations(range(Z.m), ell + 1):
            idx = list(tup)

            def gap(t):
                return symmetric_distance(Z.X[idx] + t * Z.V[idx]) - eps

            g = np.array([gap(t) for t in grid])
            hit = np.nonzero(g <= 0)[0]
            if len(hit) and hit[0] > 0:
                t = brentq(gap, grid[hit[0] - 1], grid[hit[0]], xtol=1e-14)
                if t < best[0]:
                    best = (t, tup)
    return best


def test_head_on_binary_collision_time_and_velocities():
    p = params(M=1, eps=(0.1,))
    Z = PhaseConfig([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    ev = hf.next_event(Z, p)
    # the pair distance closes from 1 to 0.1 at relative speed 2
    assert ev.time == pytest.approx(0.45, rel=1e-13)
    traj = hf.simulate(Z, p, hf.SimOptions(t_max=1.0))
    assert len(traj.events) == 1
    np.testing.assert_allclose(traj.final.V, [[-1.0, 0.0], [1.0, 0.0]], atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_next_event_matches_brute_force(seed):
    p = params()
    rng = np.random.default_rng(seed)
    Z = hf.sample_packed_configuration(p, rng, 5, 0.6)
    ev = hf.next_event(Z, p)
    t_ref, tup = brute_force_first_event(Z, p, 3.0)
    if ev is None or ev.time > 3.0:
        assert math.isinf(t_ref)
    else:
        assert ev.time == pytest.approx(t_ref, abs=1e-10)
        assert ev.tuple == tup


def test_simulation_conserves_and_stays_admissible():
    p = params()
    Z = hf.sample_packed_configuration(p, np.random.default_rng(7), 12, 0.6)
    traj = hf.simulate(Z, p, hf.SimOptions(t_max=4.0, record_states=True))
    assert len(traj.events) > 5
    E = np.array(traj.energy_log)
    P = np.array(traj.momentum_log)
    assert np.max(np.abs(E - E[0])) <= 1e-12 * E[0]
    assert np.max(np.abs(P - P[0])) <= 1e-12
    for _, s in traj.states:
        assert in_phase_space(s, p, rtol=1e-9)
    assert any(ev.order == 3 for ev in traj.events) or any(ev.order == 2 for ev in traj.events)


def test_time_reversal_retraces_events():
    p = params()
    Z = hf.sample_packed_configuration(p, np.random.default_rng(3), 16, 0.5)
    fwd = hf.simulate(Z, p, hf.SimOptions(t_max=2.0))
    assert len(fwd.events) >= 3
    back = hf.simulate(PhaseConfig(fwd.final.X, -fwd.final.V), p, hf.SimOptions(t_max=2.0))
    assert [e.tuple for e in back.events] == [e.tuple for e in reversed(fwd.events)]
    np.testing.assert_allclose([e.time for e in back.events],
                               [2.0 - e.time for e in reversed(fwd.events)], atol=1e-10)
    np.testing.assert_allclose(back.final.X, Z.X, atol=1e-10)


def test_ternary_event_only_changes_tuple_velocities():
    p = params(M=2, eps=(0.01, 0.3))
    Z = PhaseConfig([[0.0, 0.0], [0.5, 0.0], [0.25, 0.45], [3.0, 3.0]],
                    [[0.3, 0.1], [-0.3, 0.1], [0.0, -0.4], [0.2, 0.0]])
    ev = hf.next_event(Z, p)
    assert ev.order == 3 and ev.tuple == (0, 1, 2)
    traj = hf.simulate(Z, p, hf.SimOptions(t_max=ev.time + 1e-3, max_events=1))
    np.testing.assert_array_equal(traj.final.V[3], Z.V[3])
    assert not np.allclose(traj.final.V[:3], Z.V[:3])


def test_corrupted_state_detected():
    p = params(M=1, eps=(0.1,))
    Z = PhaseConfig([[0.0, 0.0], [0.01, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(hf.CorruptedState):
        hf.simulate(Z, p, hf.SimOptions(t_max=1.0))


def test_simultaneous_collisions_are_pathological():
    p = params(M=1, eps=(0.1,))
    Z = PhaseConfig([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [1.0, 5.0]],
                    [[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(hf.PathologicalEvent):
        hf.simulate(Z, p, hf.SimOptions(t_max=1.0))


def test_sim_options_validation():
    with pytest.raises(ValueError):
        hf.SimOptions(t_max=0.0)
    with pytest.raises(ValueError):
        hf.SimOptions(t_max=1.0, policy="ignore")


def test_snapshots_binary_layout():
    p = params(M=1, eps=(0.1,))
    Z = PhaseConfig([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]])
    traj = hf.simulate(Z, p, hf.SimOptions(t_max=0.3, snapshot_dt=0.1))
    data = np.frombuffer(traj.snapshots_binary(), dtype="<f8")
    m, d, count = data[:3].astype(int)
    assert (m, d) == (2, 2) and count == len(traj.snapshots) >= 3
    assert data.size == 3 + count * (1 + 2 * m * d)


def test_power_law_mle_recovers_exponent():
    rng = np.random.default_rng(0)
    # density proportional to t on [0, 1]: cumulative t^2
    samples = np.sqrt(rng.random(200_000))
    a, se, n = hf.fit_power_law_mle(samples, 0.01, 1.0)
    assert abs(a - 2.0) < 4 * se + 1e-3


def test_double_event_fraction_small_for_short_window():
    p = SystemParams(d=2, M=2, N=8, eps=(0.05, 0.1), delta=1e-4, R=1.0, rho=1.01).validate(ratio_max=1.0)
    rng = np.random.default_rng(1)
    t2 = hf.double_event_times(p, 2000, rng, 0.1)
    scan = hf.summarize_double_events(t2, np.array([1e-3, 1e-2, 1e-1]))
    assert np.all(np.diff(scan["fraction"]) >= 0)
