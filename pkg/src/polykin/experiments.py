"""Experiment drivers shared by the command line and the acceptance suite.

Each driver takes a resolved experiment dictionary, a seed and a thread
bound, and returns a Result: tidy rows (every row carries series, x, y,
y_err), a JSON-ready summary and a list of threshold checks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import collision_core as cc
from . import ellipsoid_geometry as eg
from . import hard_flow as hf
from . import hierarchy_mc as hm
from .kinetic_types import PhaseConfig, SystemParams, in_phase_space, make_scaled_params
from .rng import map_shards, shard_sizes, stream


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool

    def to_dict(self):
        return {"name": self.name, "value": self.value, "target": self.target,
                "passed": bool(self.passed)}


@dataclass
class Result:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


def _row(series, x, y, y_err=0.0, **extra):
    row = {"series": series, "x": float(x), "y": float(y), "y_err": float(y_err)}
    row.update(extra)
    return row


def _slope_check(name, slope, target, tol):
    return Check(name, float(slope), f"{target} +- {tol}", abs(slope - target) <= tol)


# ---------------------------------------------------------------- collision law

def _random_tuple(rng, n, ell, d):
    E = eg.BlockEllipsoid.canonical(ell, d)
    omega = eg.sample_ellipsoid(E, n, rng)
    V = rng.standard_normal((n, ell + 1, d))
    return omega, V


def collision_residuals(ell, d, count, rng):
    """Maximum relative conservation, involution and reversibility residuals."""
    omega, V = _random_tuple(rng, count, ell, d)
    post = cc.collide(omega, V)
    back = cc.collide(omega, post)
    scale = np.sqrt(np.sum(V * V, axis=(1, 2)))
    energy = np.sum(V * V, axis=(1, 2))
    b_pre = cc.cross_section(omega, cc.relative_velocities(V))
    b_post = cc.cross_section(omega, cc.relative_velocities(post))
    b_scale = (np.sqrt(np.sum(omega ** 2, axis=(1, 2)))
               * np.sqrt(np.sum(cc.relative_velocities(V) ** 2, axis=(1, 2))))
    return {
        "momentum": float(np.max(np.linalg.norm(post.sum(1) - V.sum(1), axis=1) / scale)),
        "energy": float(np.max(np.abs(np.sum(post * post, axis=(1, 2)) - energy) / energy)),
        "relative_speed": float(np.max(np.abs(cc.relative_speed(post) - cc.relative_speed(V))
                                       / cc.relative_speed(V))),
        "involution": float(np.max(np.sqrt(np.sum((back - V) ** 2, axis=(1, 2))) / scale)),
        "reversibility": float(np.max(np.abs(b_post + b_pre) / b_scale)),
    }


def binary_oracle_residual(count, d, rng):
    """Max deviation of collide from the classical reflection v1' = v1 + <v2 - v1, n> n."""
    n = rng.standard_normal((count, d))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    V = rng.standard_normal((count, 2, d))
    proj = np.sum((V[:, 1] - V[:, 0]) * n, axis=1)[:, None]
    ref = np.stack([V[:, 0] + proj * n, V[:, 1] - proj * n], axis=1)
    out = cc.collide(n[:, None, :], V)
    return float(np.max(np.abs(out - ref)))


def _positive_hemisphere(rng, count, ell, d):
    omega, V = _random_tuple(rng, count, ell, d)
    b = cc.cross_section(omega, cc.relative_velocities(V))
    omega = np.where((b < 0)[:, None, None], -omega, omega)
    return omega, V


def transition_residuals(ell, d, count, fd_count, rng, step=1e-3):
    """Quadratic-form, finite-difference Jacobian and inverse round-trip residuals.

    The map is quadratic in omega, so central differences carry no truncation
    error and a large step keeps rounding small.
    """
    omega, V = _positive_hemisphere(rng, count, ell, d)
    nu = cc.transition_raw(V, omega)
    psi = float(np.max(np.abs(cc.quadratic_form(nu) - 1.0)))
    trip = 0.0
    for i in range(count):
        w = cc.transition_inverse(nu[i], V[i])
        trip = max(trip, float(np.max(np.abs(w - omega[i]))))
    n = ell * d
    om = omega[:fd_count]
    VV = V[:fd_count]
    basis = np.eye(n).reshape(n, ell, d)
    plus = cc.transition_raw(VV[:, None], om[:, None] + step * basis)
    minus = cc.transition_raw(VV[:, None], om[:, None] - step * basis)
    jac = ((plus - minus) / (2 * step)).reshape(len(om), n, n)
    fd = np.abs(np.linalg.det(jac))
    exact = cc.transition_jacobian(VV, om)
    jac_err = float(np.max(np.abs(fd - exact) / np.abs(exact)))
    return {"psi": psi, "jacobian": jac_err, "roundtrip": trip}


def verify_collision(exp, seed=0, threads=None):
    res = Result()
    worst = {}
    for ell in exp["orders"]:
        for d in exp["dims"]:
            r = collision_residuals(ell, d, exp["samples"], stream(seed, 1, ell, d))
            for kind, val in r.items():
                res.rows.append(_row(f"{kind} d={d}", ell, val, order=ell, d=d))
                worst[kind] = max(worst.get(kind, 0.0), val)
    oracle = max(binary_oracle_residual(exp["oracle_cases"], d, stream(seed, 2, d))
                 for d in exp["dims"])
    res.rows.append(_row("binary_oracle", 1, oracle, order=1, d=0))
    tworst = {}
    for ell in exp["orders"]:
        for d in exp["dims"]:
            r = transition_residuals(ell, d, exp["transition_cases"], exp["jacobian_cases"],
                                     stream(seed, 3, ell, d))
            for kind, val in r.items():
                res.rows.append(_row(f"transition_{kind} d={d}", ell, val, order=ell, d=d))
                tworst[kind] = max(tworst.get(kind, 0.0), val)
    res.summary = {"conservation": worst, "binary_oracle": oracle, "transition": tworst}
    res.checks = [
        Check("momentum", worst["momentum"], "<= 1e-10", worst["momentum"] <= 1e-10),
        Check("energy", worst["energy"], "<= 1e-10", worst["energy"] <= 1e-10),
        Check("relative_speed", worst["relative_speed"], "<= 1e-10",
              worst["relative_speed"] <= 1e-10),
        Check("involution", worst["involution"], "<= 1e-12", worst["involution"] <= 1e-12),
        Check("reversibility", worst["reversibility"], "<= 1e-10",
              worst["reversibility"] <= 1e-10),
        Check("binary_oracle", oracle, "<= 1e-12", oracle <= 1e-12),
        Check("transition_psi", tworst["psi"], "<= 1e-10", tworst["psi"] <= 1e-10),
        Check("transition_jacobian", tworst["jacobian"], "<= 1e-5", tworst["jacobian"] <= 1e-5),
        Check("transition_roundtrip", tworst["roundtrip"], "<= 1e-10",
              tworst["roundtrip"] <= 1e-10),
    ]
    return res


# ---------------------------------------------------------------- geometry lab

def _scan(values, measure, rows, family):
    ys, es = [], []
    for x in values:
        est = measure(x)
        ys.append(est.value)
        es.append(est.stderr)
        rows.append(_row(family, x, est.value, est.stderr, samples=est.samples))
    slope = eg.fit_loglog_slope(values, ys)
    return slope


def _pathological_stage(m, d, rng):
    """A fixed well-separated stage of m particles with moderate velocities."""
    angles = 2 * np.pi * np.arange(m) / m
    X = np.zeros((m, d))
    X[:, 0], X[:, 1] = np.cos(angles), np.sin(angles)
    V = 0.5 * rng.standard_normal((m, d))
    return PhaseConfig(X, V)


def pathological_scan(exp, seed, rows):
    """Measures of the pathological families against eta with gamma = kappa eta^2."""
    ell, d = exp["ell"], exp["d"]
    stage = _pathological_stage(exp["stage_size"], d, stream(seed, 7, 0))
    etas = np.logspace(math.log10(exp["eta_min"]), math.log10(exp["eta_max"]), exp["points"])
    series = {"V": [], "A": [], "U*|V*": [], "union": []}
    for i, eta in enumerate(etas):
        gamma = exp["kappa"] * eta ** 2
        meas = _bad_measures(stage, ell, d, gamma, eta, exp["samples"], stream(seed, 7, 1, i),
                             exp["R"])
        for name in series:
            series[name].append(meas[name])
            rows.append(_row(f"pathological {name}", eta, meas[name].value, meas[name].stderr,
                             samples=meas[name].samples))
    slopes = {name: eg.fit_loglog_slope(etas, [e.value for e in vals])
              for name, vals in series.items() if name != "union"}
    env = np.array([hm.bad_envelope(stage.m, exp["R"], ell, d, eta) for eta in etas])
    union = np.array([e.value for e in series["union"]])
    const = union[-1] / env[-1]
    ratio = float(np.max(union / (const * env)))
    return slopes, ratio, const


def _bad_measures(stage, ell, d, gamma, eta, count, rng, R, chunk=200_000):
    """Normalized measures of V, A, U* u V* and the full union for one eta."""
    E = eg.BlockEllipsoid.canonical(ell, d)
    sums = {"V": 0, "A": 0, "U*|V*": 0, "union": 0}
    done = 0
    while done < count:
        n = min(chunk, count - done)
        om = eg.sample_ellipsoid(E, n, rng)
        va = R * hm._ball(rng, n, ell * d).reshape(n, ell, d)
        b = cc.cross_section(om, va - stage.V[0])
        om = np.where((b < 0)[:, None, None], -om, om)
        X = np.broadcast_to(stage.X, (n,) + stage.X.shape)
        V = np.broadcast_to(stage.V, (n,) + stage.V.shape)
        fam = hm.bad_set_families(X, V, np.zeros(n, dtype=np.int64), om, va, gamma, eta)
        sums["V"] += int(fam["V"].sum())
        sums["A"] += int(fam["A"].sum())
        sums["U*|V*"] += int((fam["U*"] | fam["V*"]).sum())
        sums["union"] += int(hm.bad_set_union(fam).sum())
        done += n
    return {k: eg.McEstimate.from_sums(v, v, count) for k, v in sums.items()}


def geometry_lab(exp, seed=0, threads=None):
    res = Result()
    fams = exp["families"]
    n = exp["samples"]
    ppd = exp["points_per_decade"]

    def grid(lo, hi):
        return np.logspace(math.log10(lo), math.log10(hi), int(round(math.log10(hi / lo) * ppd)) + 1)

    slopes = {}
    if "cylinder" in fams:
        E = eg.BlockEllipsoid.canonical(2, 3)
        slopes["cylinder"] = _scan(grid(1e-4, 1e-1), lambda r: eg.estimate_cylinder(
            E, r, n, rng=stream(seed, 6, 1, int(round(1e6 * r)))), res.rows, "cylinder d=3")
        res.checks.append(_slope_check("cylinder/ball exponent d=3", slopes["cylinder"], 1.0, 0.1))
    if "annulus" in fams:
        E = eg.BlockEllipsoid.canonical(2, 2)
        form = np.diag([1.0, 0.0])
        slopes["annulus"] = _scan(grid(1e-4, 1e-1), lambda b: eg.estimate_annulus(
            E, form, 0.3, b, n, rng=stream(seed, 6, 2, int(round(1e7 * b)))), res.rows,
            "annulus l=2 d=2")
        res.checks.append(_slope_check("annulus exponent", slopes["annulus"], 1.0, 0.1))
    if "cap" in fams:
        E = eg.BlockEllipsoid.canonical(2, 2)
        slopes["cap"] = _scan(grid(1e-3, 1e-1), lambda th: eg.estimate_cap(
            E, math.cos(th), [1.0, 0.0], n, rng=stream(seed, 6, 3, int(round(1e7 * th)))),
            res.rows, "cap d=2")
        res.checks.append(_slope_check("cap exponent", slopes["cap"], 1.0, 0.1))
    if "pair_cone" in fams:
        E = eg.BlockEllipsoid.canonical(2, 2)
        slopes["pair_cone"] = _scan(grid(1e-3, 1e-1), lambda th: eg.estimate_pair_cone(
            E, math.cos(th), [1.0, 0.0], n, rng=stream(seed, 6, 4, int(round(1e7 * th)))),
            res.rows, "pair cone d=2")
        res.checks.append(_slope_check("pair-cone exponent", slopes["pair_cone"], 1.0, 0.1))
    if "strip" in fams:
        E = eg.BlockEllipsoid.canonical(2, 3)
        slopes["strip"] = _scan(grid(1e-2, 1e-1), lambda r: eg.estimate_strip(
            E, r, 1.0, 1.0, n, rng=stream(seed, 6, 5, int(round(1e6 * r)))), res.rows,
            "strip d=3")
    if "pathological" in fams:
        p = exp["pathological"]
        path_slopes, ratio, const = pathological_scan(p, seed, res.rows)
        d = p["d"]
        expected = {"V": d, "A": 1.0, "U*|V*": (d - 1) / 2.0}
        for name, target in expected.items():
            slopes[f"pathological {name}"] = path_slopes[name]
            res.checks.append(_slope_check(f"pathological {name} exponent", path_slopes[name],
                                           target, 0.15))
        res.checks.append(Check("pathological union envelope", ratio, "<= 1", ratio <= 1.0))
        res.summary["envelope_constant"] = const
    res.summary["slopes"] = slopes
    return res


# ---------------------------------------------------------------- simulator integrity

def _trajectory_report(params, rng, radius, t_max, snapshot_dt):
    Z = hf.sample_packed_configuration(params, rng, params.N, radius)
    traj = hf.simulate(Z, params, hf.SimOptions(t_max=t_max, snapshot_dt=snapshot_dt))
    E = np.array(traj.energy_log)
    drift = float(np.max(np.abs(E - E[0])) / E[0])
    states = [Z] + [s for _, s in traj.snapshots] + [traj.final]
    inside = all(in_phase_space(s, params) for s in states)
    return {"events": len(traj.events), "drift": drift, "states": len(states),
            "inside": inside, "grazing": traj.grazing, "trajectory": traj}


def time_reversal(traj, params, segment):
    """Retrace events 1..segment backwards; max mismatch of mirrored times and tuples."""
    ev = traj.events
    if len(ev) <= segment:
        raise ValueError("trajectory has too few events for the reversal segment")
    t_end = 0.5 * (ev[segment - 1].time + ev[segment].time)
    fwd = hf.simulate(traj.initial, params, hf.SimOptions(t_max=t_end, record_states=False))
    start = PhaseConfig(fwd.final.X, -fwd.final.V)
    back = hf.simulate(start, params, hf.SimOptions(t_max=t_end))
    if len(back.events) != len(fwd.events):
        return math.inf, False, math.inf
    mirrored = [t_end - e.time for e in reversed(fwd.events)]
    resid = max(abs(a.time - b) for a, b in zip(back.events, mirrored))
    same = all(a.tuple == b.tuple for a, b in zip(back.events, reversed(fwd.events)))
    pos = float(np.max(np.abs(back.final.X - traj.initial.X)))
    return float(resid), bool(same), pos


def simulate_experiment(exp, params=None, seed=0, threads=None):
    res = Result()
    if params is None:
        params = make_scaled_params(exp["d"], exp["M"], exp["N"], ratio_max=exp["ratio_max"])
    total, batch_index, reports = 0, 0, []
    while total < exp["target_events"]:
        sizes = [1] * exp["batch"]

        def run(rng, _):
            r = _trajectory_report(params, rng, exp["radius"], exp["t_max"], exp["snapshot_dt"])
            return r

        for r in map_shards(run, sizes, seed, key=(4_000 + batch_index), threads=threads):
            reports.append(r)
            total += r["events"]
        batch_index += 1
    for i, r in enumerate(reports):
        res.rows.append(_row("energy_drift", i, r["drift"], 0.0, events=r["events"],
                             states=r["states"], inside=int(r["inside"]), grazing=r["grazing"]))
    drift = max(r["drift"] for r in reports)
    inside = all(r["inside"] for r in reports)
    seg = exp["reversal_segment"]
    target = next((r for r in reports if r["events"] > seg), None)
    if target is None:
        raise RuntimeError("no trajectory long enough for the reversal segment")
    resid, same, pos = time_reversal(target["trajectory"], params, seg)
    res.summary = {"events": total, "trajectories": len(reports), "max_energy_drift": drift,
                   "all_states_admissible": inside, "reversal_time_residual": resid,
                   "reversal_tuples_match": same, "reversal_position_residual": pos,
                   "params": params.to_dict()}
    res.artifacts["events.jsonl"] = reports[0]["trajectory"].to_jsonl()
    res.checks = [
        Check("events", total, f">= {exp['target_events']}", total >= exp["target_events"]),
        Check("energy_drift", drift, "<= 1e-9", drift <= 1e-9),
        Check("states_in_D", float(inside), "== 1", inside),
        Check("reversal_time_residual", resid, "<= 1e-8", resid <= 1e-8 and same),
    ]
    return res


# ---------------------------------------------------------------- double events

def double_event_experiment(exp, params=None, seed=0, threads=None):
    res = Result()
    if params is None:
        params = make_scaled_params(exp["d"], exp["M"], exp["N"], ratio_max=exp["ratio_max"],
                                    R=exp["R"], rho=exp["rho"])
    deltas = np.logspace(math.log10(exp["delta_min"]), math.log10(exp["delta_max"]),
                         exp["points"])
    sizes = shard_sizes(exp["ensemble"], math.ceil(exp["ensemble"] / exp["shard"]))
    parts = map_shards(lambda rng, n: hf.double_event_times(params, n, rng, deltas[-1]),
                       sizes, seed, key=5, threads=threads)
    t2 = np.concatenate(parts)
    scan = hf.summarize_double_events(t2, deltas, exp["delta_max"] / exp["delta_min"])
    for dl, f, e in zip(scan["delta"], scan["fraction"], scan["stderr"]):
        res.rows.append(_row("double_event_fraction", dl, f, e, samples=exp["ensemble"]))
    res.summary = dict(scan, params=params.to_dict())
    res.checks = [_slope_check("double-event slope", scan["mle_slope"], 2.0, 0.3)]
    return res


# ---------------------------------------------------------------- hierarchy comparison

def proximity_check(count, max_s, max_k, max_M, seed, N=1024):
    """Worst per-stage and aggregate proximity margins over random adjunctions.

    Returns (per-stage excess, aggregate excess, velocities identical).
    """
    rng = stream(seed, 8)
    stage_excess, agg_excess, same_v = -math.inf, -math.inf, True
    cache = {}
    for _ in range(count):
        d = int(rng.integers(2, 4))
        M = int(rng.integers(1, max_M + 1))
        s = int(rng.integers(1, max_s + 1))
        k = int(rng.integers(0, max_k + 1))
        if (d, M) not in cache:
            cache[(d, M)] = make_scaled_params(d, M, N, scaling="unit", ratio_max=0.99,
                                               R=2.0, rho=4.0)
        params = cache[(d, M)]
        Z = PhaseConfig(rng.uniform(-1, 1, (s, d)), rng.standard_normal((s, d)))
        adj = hm.random_adjunction(s, k, M, d, 1.0, 0.01, rng)
        a = hm.build_pseudo_trajectory(Z, adj, params, "boltzmann")
        b = hm.build_pseudo_trajectory(Z, adj, params, "bbgky")
        eps = params.eps[-1]
        n = max(k, s + 1)
        for i, (za, zb) in enumerate(zip(a.plus, b.plus), start=1):
            disp = np.linalg.norm(za.X - zb.X, axis=1)
            stage_excess = max(stage_excess, float(np.max(disp)) - eps * (i - 1))
            agg_excess = max(agg_excess, float(np.linalg.norm(za.X - zb.X))
                             - math.sqrt(M) * n ** 1.5 * eps)
            same_v &= bool(np.array_equal(za.V, zb.V))
    return stage_excess, agg_excess, same_v


def hierarchy_compare(exp, seed=0, threads=None):
    res = Result()
    checks = res.checks
    if exp["proximity_sequences"] > 0:
        st, ag, same = proximity_check(exp["proximity_sequences"], 3, 4, 3, seed)
        res.summary["proximity"] = {"stage_excess": st, "aggregate_excess": ag,
                                    "velocities_identical": same}
        checks.append(Check("proximity per stage", st, "<= 1e-12", st <= 1e-12))
        checks.append(Check("proximity aggregate", ag, "<= 1e-12", ag <= 1e-12))
        checks.append(Check("variant velocities identical", float(same), "== 1", same))
    tmpl = dict(exp["template"])
    params0 = make_scaled_params(N=exp["N_sequence"][0], **tmpl)
    lwp = hm.lwp_constants(params0, exp["C_d"])
    t = exp["t_fraction"] * lwp["T"]
    cfg = hm.HierarchyConfig(delta=exp["delta"], eta=exp["eta"], eps0=exp["eps0"],
                             alpha=exp["alpha"], C_d=exp["C_d"])
    f0 = hm.gaussian_bump_data(tmpl["beta0"], tmpl["mu0"], exp["bump_center"],
                               exp["bump_radius"])
    phi = hm.velocity_bump(exp["phi_radius"])
    probes = [np.asarray(p, dtype=float) for p in exp["probes"]]
    n = exp["samples"]
    env = hm.term_envelope(params0, probes[0].shape[0], phi.sup, f0.weighted_sup)
    rows = []
    envelope_ok = True
    for N in exp["N_sequence"]:
        params = make_scaled_params(N=N, **tmpl)
        best = None
        for pi, X_s in enumerate(probes):
            out = hm.observable_series(phi, f0, X_s, t, params, cfg, "all", n, seed,
                                       threads=threads)
            for name in ("boltzmann", "bbgky"):
                for k, term in enumerate(out[name].terms):
                    ok = abs(term.value) <= env * 2.0 ** -k
                    envelope_ok &= ok
                    res.rows.append(_row(f"term {name} k={k} probe={pi}", N, term.value,
                                         term.stderr, samples=term.samples))
            diff = out["difference"].total
            if best is None or abs(diff.value) > abs(best.value):
                best = diff
        rows.append((N, best))
        res.rows.append(_row("difference", N, abs(best.value), best.stderr,
                             samples=best.samples))
    # k = 0 agreement of the two variants on independent streams
    params = make_scaled_params(N=exp["N_sequence"][-1], **tmpl)
    a = hm.elementary_observable(phi, f0, probes[0], 0, t, params, cfg, "boltzmann", n, seed + 1)
    b = hm.elementary_observable(phi, f0, probes[0], 0, t, params, cfg, "bbgky", n, seed + 2)
    joint = math.hypot(a.stderr, b.stderr)
    gap = abs(a.value - b.value)
    res.rows.append(_row("k0 boltzmann", 0, a.value, a.stderr, samples=a.samples))
    res.rows.append(_row("k0 bbgky", 0, b.value, b.stderr, samples=b.samples))
    worst = -math.inf
    for (n1, d1), (n2, d2) in zip(rows[:-1], rows[1:]):
        worst = max(worst, (abs(d2.value) - abs(d1.value)) / math.hypot(d1.stderr, d2.stderr))
    res.summary.update({"T": lwp["T"], "t": t, "C_tilde": lwp["C_tilde"], "envelope": env,
                        "differences": [[N, abs(d.value), d.stderr] for N, d in rows],
                        "k0_gap_in_stderr": gap / joint if joint else 0.0})
    checks.append(Check("k=0 agreement (stderr units)", gap / joint if joint else 0.0, "<= 3",
                        gap <= 3 * joint))
    checks.append(Check("difference decreasing (max increase in stderr units)", worst, "<= 3",
                        worst <= 3))
    checks.append(Check("2^-k term envelope", float(envelope_ok), "== 1", envelope_ok))
    return res


# ---------------------------------------------------------------- propagation of chaos

def chaos_test(exp, seed=0, threads=None):
    res = Result()
    tmpl = dict(exp["template"])
    params = make_scaled_params(**tmpl)
    beta0, mu0 = tmpl["beta0"], tmpl["mu0"]
    maxw = hm.maxwellian_data(beta0, mu0)
    rng = stream(seed, 10, 0)
    worst = 0.0
    for ell in exp["orders"]:
        for i in range(exp["test_points"]):
            x = rng.uniform(-1, 1, params.d)
            v = rng.standard_normal(params.d) / math.sqrt(beta0)
            q = hm.collision_operator_Q(maxw, ell, x, v, params, exp["q_samples"],
                                        stream(seed, 10, ell, i + 1))
            z = abs(q.value) / q.stderr if q.stderr > 0 else (0.0 if q.value == 0 else math.inf)
            worst = max(worst, z)
            res.rows.append(_row(f"Q maxwellian l={ell}", i, q.value, q.stderr,
                                 samples=q.samples))
    res.checks.append(Check("Q at Maxwellian (max |Q|/stderr)", worst, "<= 3", worst <= 3))

    cfg = hm.HierarchyConfig(delta=exp["delta"], eta=exp["eta"], eps0=exp["eps0"])
    T = hm.lwp_constants(params, cfg.C_d)["T"]
    t = exp["t_fraction"] * T
    phi = hm.velocity_bump(exp["phi_radius"])
    X_s = np.zeros((1, params.d))
    # every term k < n_trunc must have a nonempty time simplex, or the comparison is vacuous
    active = t > params.n_trunc * cfg.delta
    res.checks.append(Check("series time admits all terms", t, f"> {params.n_trunc * cfg.delta}",
                            active))
    series = hm.observable_series(phi, maxw, X_s, t, params, cfg, "boltzmann",
                                  exp["series_samples"], seed + 1)
    free = hm.elementary_observable(phi, maxw, X_s, 0, t, params, cfg, "boltzmann",
                                    exp["series_samples"], seed + 2)
    joint = math.hypot(series.total.stderr, free.stderr)
    gap = abs(series.total.value - free.value)
    res.rows.append(_row("maxwellian series", t, series.total.value, series.total.stderr))
    res.rows.append(_row("free flight", t, free.value, free.stderr))
    res.checks.append(Check("Maxwellian series vs free flight (stderr units)",
                            gap / joint if joint else 0.0, "<= 3", gap <= 3 * joint))

    # product-solution oracle on spatially inhomogeneous data
    ocfg = hm.HierarchyConfig(delta=exp["oracle_delta"], eta=exp["eta"], eps0=exp["eps0"],
                              exclude_bad=False)
    # two-stream data keeps the collision terms away from zero
    bump = hm.two_stream_data(exp["oracle_mu0"], exp["bump_center"], exp["bump_radius"],
                              exp["oracle_drift"])
    t_or = exp["oracle_t"]
    _, per_k = hm.product_solution_observable(phi, bump, [0.0] * params.d, t_or, params,
                                              exp["oracle_depth"], exp["oracle_samples"],
                                              stream(seed, 10, 99))
    z_max = 0.0
    for k in range(exp["oracle_depth"] + 1):
        h = hm.elementary_observable(phi, bump, X_s, k, t_or, params, ocfg, "boltzmann",
                                     exp["oracle_samples"], seed + 3, check_time=False)
        joint = math.hypot(h.stderr, per_k[k].stderr)
        z = abs(h.value - per_k[k].value) / joint if joint else 0.0
        z_max = max(z_max, z)
        res.rows.append(_row("series term", k, h.value, h.stderr))
        res.rows.append(_row("product solution term", k, per_k[k].value, per_k[k].stderr))
    res.checks.append(Check("series vs product solution (max stderr units)", z_max, "<= 3",
                            z_max <= 3))
    res.summary = {"T": T, "t": t, "Q_max_z": worst, "series_gap": gap,
                   "oracle_max_z": z_max}
    return res


# ---------------------------------------------------------------- registry

DEFAULTS = {
    "verify-collision": {
        "orders": [1, 2, 3], "dims": [2, 3], "samples": 100_000, "oracle_cases": 10_000,
        "transition_cases": 1_000, "jacobian_cases": 1_000,
    },
    "geometry-lab": {
        "families": ["cylinder", "annulus", "cap", "pair_cone", "pathological"],
        "samples": 1_000_000, "points_per_decade": 4,
        "pathological": {"ell": 2, "d": 2, "stage_size": 3, "kappa": 0.01, "eta_min": 0.02,
                         "eta_max": 0.3, "points": 9, "samples": 1_000_000, "R": 2.0},
    },
    "simulate": {
        "d": 2, "M": 2, "N": 64, "ratio_max": 0.5, "radius": 0.12, "t_max": 5.0,
        "snapshot_dt": 0.05, "target_events": 10_000, "batch": 8, "reversal_segment": 100,
    },
    "double-event-scan": {
        "d": 2, "M": 2, "N": 8, "ratio_max": 0.9, "R": 1.0, "rho": 1.01,
        "ensemble": 100_000, "delta_min": 1e-3, "delta_max": 1e-1, "points": 9,
        "shard": 5_000,
    },
    "hierarchy-compare": {
        "N_sequence": [64, 256, 1024, 4096], "samples": 1_000_000,
        "probes": [[[0.1, 0.0]], [[0.6, 0.3]]], "t_fraction": 0.5,
        "delta": 0.01, "eta": 0.05, "eps0": 0.05, "alpha": 0.01, "C_d": 1.0,
        "bump_center": [0.0, 0.0], "bump_radius": 1.0, "phi_radius": 2.0,
        "proximity_sequences": 10_000,
        "template": {"d": 2, "M": 2, "scaling": "unit", "ratio_max": 0.9, "R": 5.0,
                     "rho": 8.0, "beta0": 2.0, "mu0": 3.0, "n_trunc": 3},
    },
    "chaos-test": {
        "orders": [1, 2], "test_points": 20, "q_samples": 100_000,
        "series_samples": 200_000, "t_fraction": 0.5, "delta": 0.01, "eta": 0.05,
        "eps0": 0.05, "phi_radius": 2.0, "oracle_t": 0.5, "oracle_delta": 1e-7,
        "oracle_depth": 2, "oracle_samples": 2_000_000, "bump_center": [0.2, 0.0],
        "bump_radius": 0.5, "oracle_mu0": 0.0, "oracle_drift": [1.0, 0.0],
        "template": {"d": 2, "M": 2, "N": 1024, "scaling": "unit", "ratio_max": 0.9,
                     "R": 6.0, "rho": 8.0, "beta0": 2.0, "mu0": 3.0, "n_trunc": 3},
    },
}

COMMANDS = {
    "verify-collision": lambda e, p, s, t: verify_collision(e, s, t),
    "geometry-lab": lambda e, p, s, t: geometry_lab(e, s, t),
    "simulate": lambda e, p, s, t: simulate_experiment(e, p, s, t),
    "double-event-scan": lambda e, p, s, t: double_event_experiment(e, p, s, t),
    "hierarchy-compare": lambda e, p, s, t: hierarchy_compare(e, s, t),
    "chaos-test": lambda e, p, s, t: chaos_test(e, s, t),
}

USES_PARAMS = {"simulate", "double-event-scan"}


def run_command(command, experiment=None, params=None, seed=0, threads=None):
    exp = merge_defaults(DEFAULTS[command], experiment or {})
    if params is not None and not isinstance(params, SystemParams):
        params = SystemParams.from_dict(params).validate(ratio_max=1.0)
    return COMMANDS[command](exp, params, seed, threads)


def merge_defaults(defaults, overrides, path="experiment"):
    """Deep-merge overrides into defaults, rejecting unknown keys."""
    out = dict(defaults)
    for key, val in overrides.items():
        if key not in defaults:
            raise KeyError(f"unknown key {path}.{key}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise TypeError(f"{path}.{key} must be an object")
            out[key] = merge_defaults(defaults[key], val, f"{path}.{key}")
        else:
            out[key] = val
    return out
