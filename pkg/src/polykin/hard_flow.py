"""Event-driven dynamics of m hard particles with (l+1)-nary interaction zones."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import collision_core as cc
from .kinetic_types import CollisionEvent, PhaseConfig, in_phase_space, tuple_index_array


class PathologicalEvent(RuntimeError):
    """Two boundary crossings closer in time than the simultaneity tolerance."""

    def __init__(self, time, tuples):
        super().__init__(f"simultaneous collisions at t={time!r}: {tuples}")
        self.time = time
        self.tuples = tuples


class CorruptedState(RuntimeError):
    """A tuple is strictly inside its interaction zone."""


@dataclass
class SimOptions:
    t_max: float
    max_events: int = 1_000_000
    snapshot_dt: float = None
    simultaneity_tol: float = None
    policy: str = "abort"
    penetration_tol: float = 1e-9
    record_states: bool = False

    def __post_init__(self):
        if not self.t_max > 0 or self.max_events < 1:
            raise ValueError("t_max and max_events must be positive")
        if self.snapshot_dt is not None and not self.snapshot_dt > 0:
            raise ValueError("snapshot_dt must be positive")
        if self.policy not in ("abort", "resample"):
            raise ValueError("policy must be 'abort' or 'resample'")


@dataclass
class Trajectory:
    initial: PhaseConfig
    final: PhaseConfig
    t_final: float
    events: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    energy_log: list = field(default_factory=list)
    momentum_log: list = field(default_factory=list)
    states: list = field(default_factory=list)
    grazing: int = 0
    truncated: bool = False

    def to_jsonl(self):
        return "".join(ev.to_json() + "\n" for ev in self.events)

    def snapshots_binary(self):
        """Little-endian doubles with a (m, d, count) header."""
        m, d = self.initial.X.shape
        header = np.array([m, d, len(self.snapshots)], dtype="<f8")
        body = [np.concatenate([[t], s.X.ravel(), s.V.ravel()]) for t, s in self.snapshots]
        data = np.concatenate([header] + body) if body else header
        return data.astype("<f8").tobytes()


def _pair_sums(dX, dV):
    """Centred sums giving d^2(t) = c0 + 2 b t + a t^2 for each tuple."""
    n = dX.shape[-2]
    cx = dX - dX.mean(axis=-2, keepdims=True)
    cv = dV - dV.mean(axis=-2, keepdims=True)
    c0 = n * np.sum(cx * cx, axis=(-2, -1))
    b = n * np.sum(cx * cv, axis=(-2, -1))
    a = n * np.sum(cv * cv, axis=(-2, -1))
    return c0, b, a


def contact_times(X, V, idx, eps, penetration_tol=1e-9, graze_tol=cc.GRAZING_TOL):
    """Forward contact times of the tuples idx (inf where no approaching root)."""
    if not len(idx):
        return np.zeros(0)
    c0, b, a = _pair_sums(X[idx], V[idx])
    gap = c0 - eps * eps
    if np.any(gap < -penetration_tol * eps * eps):
        bad = idx[np.argmin(gap)]
        raise CorruptedState(f"tuple {tuple(int(i) for i in bad)} is inside its zone")
    gap = np.maximum(gap, 0.0)
    disc = b * b - a * gap
    approaching = (b < -graze_tol * eps) & (disc >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = gap / (-b + np.sqrt(np.where(approaching, disc, 0.0)))
    return np.where(approaching, t, np.inf)


def tuple_contact_time(Z, tup, ell, eps, penetration_tol=1e-9):
    """Smallest t >= 0 at which the tuple reaches d = eps while approaching, or None."""
    idx = np.asarray(tup, dtype=np.int64).reshape(1, -1)
    if idx.shape[1] != ell + 1 or np.any(np.diff(idx[0]) <= 0):
        raise ValueError("tuple must be increasing with l+1 entries")
    t = contact_times(Z.X, Z.V, idx, eps, penetration_tol)[0]
    return None if math.isinf(t) else float(t)


class _EventEngine:
    """Cached contact times for all tuples, refreshed only around collided particles."""

    def __init__(self, Z, params, options):
        self.X = Z.X.copy()
        self.V = Z.V.copy()
        self.t = 0.0
        self.params = params
        self.options = options
        m = Z.m
        self.orders = list(range(1, min(m - 1, params.M) + 1))
        self.idx = {ell: tuple_index_array(m, ell + 1) for ell in self.orders}
        self.touch = {ell: [np.nonzero((self.idx[ell] == p).any(axis=1))[0] for p in range(m)]
                      for ell in self.orders}
        self.times = {ell: self._compute(ell, slice(None)) for ell in self.orders}

    def _compute(self, ell, rows):
        return self.t + contact_times(self.X, self.V, self.idx[ell][rows], self.params.zone(ell),
                                      self.options.penetration_tol)

    def candidates(self):
        """(time, ell, row) of the two earliest scheduled crossings."""
        best = []
        for ell in self.orders:
            times = self.times[ell]
            if not len(times):
                continue
            k = min(2, len(times))
            rows = np.argpartition(times, k - 1)[:k]
            best.extend((float(times[r]), ell, int(r)) for r in rows)
        best.sort()
        return best[:2]

    def advance(self, t):
        self.X += (t - self.t) * self.V
        self.t = t

    def refresh(self, particles):
        for ell in self.orders:
            rows = np.unique(np.concatenate([self.touch[ell][p] for p in particles]))
            if len(rows):
                self.times[ell][rows] = self._compute(ell, rows)

    def state(self):
        return PhaseConfig(self.X.copy(), self.V.copy())


def impact_from_geometry(X_tuple, eps):
    """omega_i = (x_{i+1} - x_1) / eps for a tuple at contact."""
    return (X_tuple[1:] - X_tuple[:1]) / eps


def apply_event(Z, event, params, tol=cc.GRAZING_TOL):
    """Velocities after the event; only the tuple's velocities change.

    Returns (new PhaseConfig, kind) where kind is the pre-event classification.
    Grazing contacts leave velocities unchanged.
    """
    tup = np.asarray(event.tuple)
    ell = event.order - 1
    eps = params.zone(ell)
    omega = impact_from_geometry(Z.X[tup], eps)
    # renormalise away the O(1e-16) drift of the contact condition
    omega = omega / math.sqrt(cc.quadratic_form(omega))
    sign = int(cc.classify_sign(omega, Z.V[tup], tol))
    out = Z.copy()
    if sign == 0:
        return out, "grazing"
    if sign > 0:
        raise ValueError("event tuple is post-collisional; nothing to apply")
    out.V[tup] = cc.collide(omega, Z.V[tup], tol=None)
    return out, "precollisional"


def default_simultaneity_tol(params):
    return 1e-12 * params.eps[0] / params.R


def simulate(Z0, params, options):
    """Alternate free flight and collisions until t_max or max_events.

    Raises PathologicalEvent when two crossings fall within the simultaneity
    tolerance; callers running ensembles with policy 'resample' catch it.
    """
    tol = options.simultaneity_tol
    if tol is None:
        tol = default_simultaneity_tol(params)
    engine = _EventEngine(Z0, params, options)
    traj = Trajectory(initial=Z0.copy(), final=None, t_final=0.0)
    traj.energy_log.append(Z0.kinetic_energy())
    traj.momentum_log.append(Z0.V.sum(axis=0).copy())
    next_snap = 0.0 if options.snapshot_dt else math.inf
    last_time = -math.inf
    while True:
        cand = engine.candidates()
        t_next = cand[0][0] if cand else math.inf
        horizon = min(t_next, options.t_max)
        while next_snap <= horizon:
            engine.advance(next_snap)
            traj.snapshots.append((next_snap, engine.state()))
            next_snap += options.snapshot_dt
        if t_next > options.t_max:
            engine.advance(options.t_max)
            break
        if len(traj.events) >= options.max_events:
            traj.truncated = True
            engine.advance(t_next)
            break
        t_e, ell, row = cand[0]
        if (len(cand) > 1 and cand[1][0] - t_e <= tol) or t_e - last_time <= tol:
            tuples = [tuple(int(i) for i in engine.idx[c[1]][c[2]]) for c in cand]
            raise PathologicalEvent(t_e, tuples)
        engine.advance(t_e)
        tup = tuple(int(i) for i in engine.idx[ell][row])
        event = CollisionEvent(time=t_e, order=ell + 1, tuple=tup)
        new, kind = apply_event(engine.state(), event, params)
        if kind == "grazing":
            traj.grazing += 1
            event = CollisionEvent(time=t_e, order=ell + 1, tuple=tup, kind="grazing")
        engine.V = new.V
        engine.refresh(tup)
        last_time = t_e
        traj.events.append(event)
        traj.energy_log.append(0.5 * float(np.sum(engine.V ** 2)))
        traj.momentum_log.append(engine.V.sum(axis=0).copy())
        if options.record_states:
            traj.states.append((t_e, engine.state()))
    traj.final = engine.state()
    traj.t_final = engine.t
    return traj


def next_event(Z, params, after=0.0, simultaneity_tol=None):
    """Earliest crossing of Z after the given time, or None; ties raise PathologicalEvent."""
    if Z.m < 2:
        return None
    opts = SimOptions(t_max=1.0)
    engine = _EventEngine(Z, params, opts)
    tol = default_simultaneity_tol(params) if simultaneity_tol is None else simultaneity_tol
    for ell in engine.orders:
        engine.times[ell] = np.where(engine.times[ell] > after, engine.times[ell], np.inf)
    cand = engine.candidates()
    if not cand or math.isinf(cand[0][0]):
        return None
    if len(cand) > 1 and cand[1][0] - cand[0][0] <= tol:
        raise PathologicalEvent(cand[0][0], [tuple(int(i) for i in engine.idx[c[1]][c[2]])
                                             for c in cand])
    t_e, ell, row = cand[0]
    return CollisionEvent(time=t_e, order=ell + 1,
                          tuple=tuple(int(i) for i in engine.idx[ell][row]))


def free_flight(Z, t):
    return PhaseConfig(Z.X + t * Z.V, Z.V.copy())


def sample_in_ball(rng, count, d, radius):
    """Uniform points in the d-ball."""
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / d)
    return g * r[:, None]


def sample_configuration(params, rng, m=None, position_radius=None, velocity_radius=None,
                         max_tries=100_000):
    """Positions uniform in B_rho and velocities uniform in B_R, conditioned on the phase space."""
    m = params.N if m is None else m
    rho = params.rho if position_radius is None else position_radius
    R = params.R if velocity_radius is None else velocity_radius
    for _ in range(max_tries):
        X = sample_in_ball(rng, m, params.d, rho)
        Z = PhaseConfig(X, sample_in_ball(rng, m, params.d, R))
        if in_phase_space(Z, params):
            return Z
    raise RuntimeError("could not sample an admissible configuration")


def sample_packed_configuration(params, rng, m, radius, velocity_scale=1.0, max_tries=10_000):
    """Sequential insertion of m particles in B_radius, each kept only if admissible.

    Produces dense admissible states quickly; velocities are standard normal
    times velocity_scale with zero total momentum.
    """
    X = np.zeros((0, params.d))
    for _ in range(m):
        for _ in range(max_tries):
            cand = np.vstack([X, sample_in_ball(rng, 1, params.d, radius)])
            if in_phase_space(PhaseConfig(cand, np.zeros_like(cand)), params):
                X = cand
                break
        else:
            raise RuntimeError("packing too dense for sequential insertion")
    V = velocity_scale * rng.standard_normal((m, params.d))
    V -= V.mean(axis=0)
    return PhaseConfig(X, V)


def first_two_event_times(Z, params, horizon):
    """Times of the first two crossings within the horizon (inf when absent).

    A simultaneous (multiple) collision counts as two crossings at its time.
    """
    try:
        traj = simulate(Z, params, SimOptions(t_max=horizon, max_events=2))
    except PathologicalEvent as exc:
        return exc.time, exc.time
    times = [ev.time for ev in traj.events] + [math.inf, math.inf]
    return times[0], times[1]


def double_event_times(params, ensemble_size, rng, horizon):
    """Second-crossing time for each member of an admissible random ensemble."""
    out = np.empty(ensemble_size)
    for k in range(ensemble_size):
        Z = sample_configuration(params, rng)
        out[k] = first_two_event_times(Z, params, horizon)[1]
    return out


def double_event_fraction(params, delta, ensemble_size, rng):
    """Fraction of admissible initial data with two boundary hits within time delta.

    Returns (fraction, stderr).
    """
    t2 = double_event_times(params, ensemble_size, rng, delta)
    hits = (t2 <= delta).astype(float)
    return float(hits.mean()), float(hits.std(ddof=1) / math.sqrt(len(hits)))


def fit_power_law_mle(samples, lo, hi):
    """Exponent a of a density proportional to t^(a-1) on [lo, hi], fitted by maximum likelihood.

    P(t2 <= delta) ~ delta^a on the window, so a is the scaling exponent of
    the double-event fraction. Returns (a, stderr, n) with the Fisher-information
    standard error.
    """
    t = np.asarray(samples, dtype=float)
    t = t[(t >= lo) & (t <= hi)]
    n = len(t)
    if n < 2:
        raise ValueError("too few samples in the fitting window")
    mean_log = float(np.mean(np.log(t)))
    llo, lhi = math.log(lo), math.log(hi)

    def expected_log(a):
        # E[log t] under the truncated power law
        span = lhi - llo
        z = a * span
        if z > 700:
            return lhi - 1.0 / a
        return lhi - 1.0 / a + span / math.expm1(z)

    a = brentq(lambda a: expected_log(a) - mean_log, 0.05, 10.0)
    span = lhi - llo
    z = a * span
    var_log = 1.0 / a ** 2 - span ** 2 * math.exp(z) / math.expm1(z) ** 2
    return a, 1.0 / math.sqrt(n * var_log), n


def summarize_double_events(t2, deltas, window=100.0):
    """Double-event fractions at each delta from second-hit times, with OLS and MLE slopes.

    The MLE uses the second-hit times in [max(deltas)/window, max(deltas)].
    """
    t2 = np.asarray(t2, dtype=float)
    deltas = np.sort(np.asarray(deltas, dtype=float))
    hi = float(deltas[-1])
    n = len(t2)
    frac = np.array([(t2 <= dl).mean() for dl in deltas])
    err = np.sqrt(frac * (1 - frac) / n)
    ok = frac > 0
    ols = float(np.polyfit(np.log(deltas[ok]), np.log(frac[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
    mle, mle_err, used = fit_power_law_mle(t2, hi / window, hi)
    return {"delta": deltas.tolist(), "fraction": frac.tolist(), "stderr": err.tolist(),
            "ols_slope": ols, "mle_slope": mle, "mle_stderr": mle_err, "mle_samples": used}


def double_event_scan(params, deltas, ensemble_size, rng, window=100.0):
    """Double-event fractions at each delta from one shared ensemble."""
    t2 = double_event_times(params, ensemble_size, rng, float(np.max(deltas)))
    return summarize_double_events(t2, deltas, window)


def events_to_jsonl(events):
    return "".join(json.dumps({"t": e.time, "order": e.order, "tuple": list(e.tuple),
                               "kind": e.kind}) + "\n" for e in events)
