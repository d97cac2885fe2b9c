"""Pseudo-trajectories and Monte Carlo evaluation of truncated Duhamel observables.

Both hierarchies are handled by one batched builder: the Boltzmann variant
adjoins particles at the target's position, the BBGKY variant offsets them
by -eps*omega (loss) or +eps*omega (gain). Observables are estimated by
stratifying over sigma, summing the sign pattern J exactly and sampling
targets, times, velocities and impact parameters.
"""

import itertools
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import collision_core as cc
from .ellipsoid_geometry import (BlockEllipsoid, McEstimate, ellipsoid_surface_measure,
                                 sample_ellipsoid)
from .kinetic_types import ParameterError, PhaseConfig, SystemParams, make_scaled_params
from .rng import map_shards, shard_sizes, stream

SHARD = 50_000
ROUNDING_ULPS = 4


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class HierarchyConfig:
    """Experiment-level truncation parameters of the Duhamel expansion.

    delta is the separation of collision times (distinct from the event
    resolution SystemParams.delta); eta, eps0 and alpha are the pathological
    set parameters; C_d is the unnamed dimensional constant of the a-priori
    bounds.
    """

    delta: float = 0.01
    eta: float = 0.05
    eps0: float = 0.05
    alpha: float = 0.01
    C_d: float = 1.0
    exclude_bad: bool = True
    velocity_filter: bool = True
    acceptance_floor: float = 1e-3

    def __post_init__(self):
        for name in ("delta", "eta", "eps0", "alpha", "C_d"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")

    def ordering_report(self, params, R=None):
        """Which of alpha << eps0 << eta*delta, R*alpha << eta*eps0 hold at factor 0.1."""
        R = params.R if R is None else R
        return {"alpha<<eps0": self.alpha <= 0.1 * self.eps0,
                "eps0<<eta*delta": self.eps0 <= 0.1 * self.eta * self.delta,
                "R*alpha<<eta*eps0": R * self.alpha <= 0.1 * self.eta * self.eps0,
                "eps_max<<alpha": params.eps[-1] <= 0.1 * self.alpha}


@dataclass
class InitialData:
    """One-particle density f0(x, v) evaluated on arrays of shape (..., d).

    beta, when set, selects a Gaussian velocity proposal N(0, 1/beta) for the
    samplers; otherwise velocities are drawn uniformly from the truncation balls.
    weighted_sup is sup |f0| e^{mu0 + beta0 |v|^2 / 2}, the norm of the
    tensorized data, when known in closed form.
    """

    f0: callable
    beta: float = None
    weighted_sup: float = None
    name: str = "custom"

    def __call__(self, x, v):
        return self.f0(np.asarray(x, dtype=float), np.asarray(v, dtype=float))

    def check_weighted_bound(self, d, beta0, mu0, rng, count=10_000, scale=3.0, bound=1.0):
        """Spot-check 0 <= f0(x,v) and f0(x,v) e^{mu0 + beta0 |v|^2/2} <= bound at random points."""
        x = scale * rng.standard_normal((count, d))
        v = scale * rng.standard_normal((count, d))
        f = self(x, v)
        w = np.abs(f) * np.exp(mu0 + 0.5 * beta0 * np.sum(v * v, axis=1))
        return bool(np.all(f >= 0) and np.all(w <= bound * (1 + 1e-12)))


def spatial_bump(x, center, radius):
    """Smooth bump exp(1 - 1/(1 - r^2)) on |x - center| < radius, with maximum 1."""
    r2 = np.sum((x - center) ** 2, axis=-1) / radius ** 2
    inside = r2 < 1
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        val = np.exp(1.0 - 1.0 / np.where(inside, 1.0 - r2, 1.0))
    return np.where(inside, val, 0.0)


def gaussian_bump_data(beta0, mu0, center, radius):
    """f0 = e^{-mu0} bump(x) e^{-beta0 |v|^2 / 2}; its weighted norm is 1."""
    center = np.asarray(center, dtype=float)

    def f0(x, v):
        return (math.exp(-mu0) * spatial_bump(x, center, radius)
                * np.exp(-0.5 * beta0 * np.sum(v * v, axis=-1)))

    return InitialData(f0, beta=beta0, weighted_sup=1.0, name="gaussian-bump")


def maxwellian_data(beta0, mu0):
    """Spatially homogeneous f0 = e^{-mu0} e^{-beta0 |v|^2 / 2}."""

    def f0(x, v):
        return math.exp(-mu0) * np.exp(-0.5 * beta0 * np.sum(v * v, axis=-1))

    return InitialData(f0, beta=beta0, weighted_sup=1.0, name="maxwellian")


def two_stream_data(mu0, center, radius, drift, proposal_beta=0.7):
    """f0 = e^{-mu0} bump(x) (M(v - u) + M(v + u)) / 2 with unit-temperature Gaussians M.

    Far from equilibrium in v, so every collision term is of order one. The
    proposal inverse temperature must stay below 1 for bounded sample weights.
    """
    center = np.asarray(center, dtype=float)
    u = np.asarray(drift, dtype=float)

    def f0(x, v):
        return (math.exp(-mu0) * spatial_bump(x, center, radius) * 0.5
                * (np.exp(-0.5 * np.sum((v - u) ** 2, axis=-1))
                   + np.exp(-0.5 * np.sum((v + u) ** 2, axis=-1))))

    return InitialData(f0, beta=proposal_beta, name="two-stream")


def velocity_bump(radius):
    """Test function prod_i max(0, 1 - |v_i|^2 / radius^2) with sup norm 1."""

    def phi(V):
        return np.prod(np.maximum(0.0, 1.0 - np.sum(V * V, axis=-1) / radius ** 2), axis=-1)

    phi.sup = 1.0
    return phi


# ---------------------------------------------------------------- prefactors and constants

def bbgky_prefactor(params, ell, s):
    """A = eps_{l+1}^{l d - 1} binom(N - s, l); zero when fewer than l particles remain."""
    if ell < 1 or ell > params.M:
        raise ValueError("order outside 1..M")
    if params.N - s < ell:
        return 0.0
    return params.zone(ell) ** (ell * params.d - 1) * math.comb(params.N - s, ell)


def lwp_constants(params, C_d=1.0, terms=200):
    """Continuity constants C_{l+1} and existence time T.

    With lambda = beta0 / (2T), C_{l+1} = T a_l where
    a_l = C_d l^3 (2/beta0) e^{-l(mu0 - beta0/2)} (beta0/2)^{-l d/2} (1 + (beta0/2)^{-1/2}).
    C_tilde = sum_{l >= 1} 2^l a_l / l! bounds sum_l 2^l A_l C_{l+1} / T for every M,
    because A_l <= 1/l!, and T = 1 / (2 C_tilde).
    """
    b0, mu0, d = params.beta0, params.mu0, params.d
    if not b0 > 0:
        raise ParameterError("beta0 must be positive")
    half = b0 / 2.0

    def log_a(ell):
        return (math.log(C_d) + 3 * math.log(ell) + math.log(2.0 / b0) - ell * (mu0 - half)
                - 0.5 * ell * d * math.log(half) + math.log1p(half ** -0.5))

    c_tilde = sum(math.exp(ell * math.log(2.0) + log_a(ell) - math.lgamma(ell + 1))
                  for ell in range(1, terms + 1))
    T = 1.0 / (2.0 * c_tilde)
    C = [T * math.exp(log_a(ell)) for ell in range(1, params.M + 1)]
    A = [bbgky_prefactor(params, ell, 0) for ell in range(1, params.M + 1)]
    weighted = sum(2 ** ell * a * c for ell, (a, c) in enumerate(zip(A, C), start=1))
    return {"C": C, "T": T, "C_tilde": c_tilde, "lambda": b0 / (2 * T),
            "weighted_sum": weighted, "bound": c_tilde * T}


def term_envelope(params, s, phi_sup=1.0, f0_norm=1.0):
    """C with |I_{s,k}(t)| <= C 2^-k for t <= T.

    From the a-priori bound |||F^(k)||| <= 2^-k ||F_0||, integrated against the
    weight at time T: beta(T) = beta0/2, mu(T) = mu0 - beta0/2.
    """
    b0, mu0, d = params.beta0, params.mu0, params.d
    return (phi_sup * (4 * math.pi / b0) ** (d * s / 2.0)
            * math.exp(-s * (mu0 - b0 / 2.0)) * f0_norm)


# ---------------------------------------------------------------- adjunction sequences

def sigma_sequences(k, M):
    return list(itertools.product(range(1, M + 1), repeat=k))


def simplex_volume(k, t, delta):
    """Volume of {t > t_1 > ... > t_k > 0, all k+1 gaps >= delta}."""
    free = t - (k + 1) * delta
    if k == 0:
        return 1.0
    return free ** k / math.factorial(k) if free > 0 else 0.0


def sample_times(k, t, delta, count, rng):
    """Uniform samples of the separated time simplex, shape (count, k), decreasing."""
    free = t - (k + 1) * delta
    if free <= 0:
        raise ValueError("empty time simplex: t <= (k+1) delta")
    u = np.sort(rng.random((count, k)) * free, axis=1)[:, ::-1]
    shift = delta * np.arange(k, 0, -1)
    return u + shift


@dataclass
class AdjunctionSequence:
    """One adjunction history; targets are 0-based particle indices."""

    s: int
    sigma: tuple
    J: tuple
    targets: tuple
    times: np.ndarray
    impacts: list
    velocities: list
    t: float

    @property
    def k(self):
        return len(self.sigma)

    def sigma_tilde(self, i):
        return sum(self.sigma[:i])

    def validate(self, M, delta=0.0):
        k = self.k
        if not (len(self.J) == len(self.targets) == len(self.impacts)
                == len(self.velocities) == k == len(self.times)):
            raise ValueError("adjunction fields must all have length k")
        if any(not 1 <= sg <= M for sg in self.sigma):
            raise ValueError("sigma entries must lie in 1..M")
        if any(j not in (-1, 1) for j in self.J):
            raise ValueError("signs must be +-1")
        for i, (m, om, va) in enumerate(zip(self.targets, self.impacts, self.velocities)):
            if not 0 <= m < self.s + self.sigma_tilde(i):
                raise ValueError(f"target {m} out of range at stage {i + 1}")
            if np.shape(om)[0] != self.sigma[i] or np.shape(va)[0] != self.sigma[i]:
                raise ValueError("impact and velocity blocks must have sigma_i rows")
        full = np.concatenate([[self.t], np.asarray(self.times, dtype=float), [0.0]])
        if np.any(np.diff(full) > -delta) if delta > 0 else np.any(np.diff(full) >= 0):
            raise ValueError("times must decrease with gaps >= delta")
        return self


def random_adjunction(s, k, M, d, t, delta, rng, R=1.0):
    """Random sequence with impacts on the canonical ellipsoids and velocities in B_R."""
    sigma = tuple(int(x) for x in rng.integers(1, M + 1, size=k))
    J = tuple(int(x) for x in rng.choice([-1, 1], size=k))
    tilde = np.concatenate([[0], np.cumsum(sigma)])
    targets = tuple(int(rng.integers(0, s + tilde[i])) for i in range(k))
    times = sample_times(k, t, delta, 1, rng)[0] if k else np.zeros(0)
    impacts = [sample_ellipsoid(BlockEllipsoid.canonical(sg, d), 1, rng)[0] for sg in sigma]
    velocities = [R * _ball(rng, 1, sg * d)[0].reshape(sg, d) for sg in sigma]
    return AdjunctionSequence(s, sigma, J, targets, times, impacts, velocities, t)


@dataclass
class PseudoTrajectory:
    """States Z(t_i^+) for i = 1..k, followed by Z(0^+)."""

    variant: str
    plus: list = field(default_factory=list)
    minus: list = field(default_factory=list)

    @property
    def final(self):
        return self.plus[-1]


def _propagate(X, V, t, times, sigma, J, targets, omegas, vadj, offsets, orient=False,
               bad_fn=None, record=False):
    """Batched backward construction; X, V have shape (n, s, d).

    Returns (X0, V0, bvals, bad, omegas_used, plus, minus) where bvals[i] is
    b(omega_i, v_adj - v_target(t_i^+)) after optional orientation.
    """
    n = X.shape[0]
    rows = np.arange(n)
    Xc, Vc = X.copy(), V.copy()
    prev = np.full(n, float(t))
    bvals, used, plus, minus = [], [], [], []
    bad = np.zeros(n, dtype=bool)
    for i, ell in enumerate(sigma):
        ti = times[:, i]
        Xc = Xc - (prev - ti)[:, None, None] * Vc
        prev = ti
        if record:
            plus.append((Xc.copy(), Vc.copy()))
        tgt = targets[:, i]
        vm = Vc[rows, tgt]
        om = omegas[i]
        va = vadj[i]
        b = cc.cross_section(om, va - vm[:, None, :])
        if orient:
            om = np.where((b < 0)[:, None, None], -om, om)
            b = np.abs(b)
        bvals.append(b)
        used.append(om)
        if bad_fn is not None:
            bad |= bad_fn(Xc, Vc, tgt, om, va, ell)
        xm = Xc[rows, tgt]
        if J[i] < 0:
            new_v = va
            new_x = xm[:, None, :] - offsets[i] * om
        else:
            post = cc.collide(om, np.concatenate([vm[:, None, :], va], axis=1), tol=None)
            Vc = Vc.copy()
            Vc[rows, tgt] = post[:, 0]
            new_v = post[:, 1:]
            new_x = xm[:, None, :] + offsets[i] * om
        Xc = np.concatenate([Xc, new_x], axis=1)
        Vc = np.concatenate([Vc, new_v], axis=1)
        if record:
            minus.append((Xc.copy(), Vc.copy()))
    Xc = Xc - prev[:, None, None] * Vc
    if record:
        plus.append((Xc.copy(), Vc.copy()))
    return Xc, Vc, bvals, bad, used, plus, minus


def build_pseudo_trajectory(Z_s, adj, params, variant="boltzmann", eps_scale=1.0):
    """Pseudo-trajectory of Z_s under the adjunction sequence.

    variant 'boltzmann' places adjoined particles at the target; 'bbgky'
    offsets them by -eps omega (j = -1) or +eps omega (j = +1), with eps the
    zone of the adjoined order (scaled by eps_scale).
    """
    if variant not in ("boltzmann", "bbgky"):
        raise ValueError("variant must be 'boltzmann' or 'bbgky'")
    adj.validate(params.M)
    if Z_s.m != adj.s:
        raise ValueError("Z_s has the wrong number of particles")
    k = adj.k
    offsets = [0.0 if variant == "boltzmann" else eps_scale * params.zone(sg)
               for sg in adj.sigma]
    X = Z_s.X[None]
    V = Z_s.V[None]
    times = np.asarray(adj.times, dtype=float).reshape(1, k)
    targets = np.asarray(adj.targets, dtype=np.int64).reshape(1, k)
    omegas = [np.asarray(o, dtype=float)[None] for o in adj.impacts]
    vadj = [np.asarray(v, dtype=float)[None] for v in adj.velocities]
    out = _propagate(X, V, adj.t, times, adj.sigma, adj.J, targets, omegas, vadj, offsets,
                     record=True)
    plus = [PhaseConfig(x[0], v[0]) for x, v in out[5]]
    minus = [PhaseConfig(x[0], v[0]) for x, v in out[6]]
    return PseudoTrajectory(variant, plus, minus)


# ---------------------------------------------------------------- good configurations

def pair_min_distance(dx, dv, t_from=0.0):
    """min over tau >= t_from of |dx - tau dv|, batched over leading axes."""
    vv = np.sum(dv * dv, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 0, np.sum(dx * dv, axis=-1) / np.where(vv > 0, vv, 1.0), 0.0)
    tau = np.maximum(tau, t_from)
    return np.linalg.norm(dx - tau[..., None] * dv, axis=-1)


def is_good(X, V, theta, t0=0.0):
    """Z in G(theta, t0): every pair stays farther than theta for backward times > t0."""
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    m = X.shape[-2]
    if m < 2:
        return np.ones(X.shape[:-2], dtype=bool)
    i, j = np.triu_indices(m, 1)
    dist = pair_min_distance(X[..., i, :] - X[..., j, :], V[..., i, :] - V[..., j, :], t0)
    return np.all(dist > theta, axis=-1)


def is_well_separated(X, theta):
    X = np.asarray(X, dtype=float)
    m = X.shape[-2]
    if m < 2:
        return True
    i, j = np.triu_indices(m, 1)
    return bool(np.all(np.linalg.norm(X[..., i, :] - X[..., j, :], axis=-1) > theta))


class GoodVelocitySampler:
    """Rejection sampler for V_s in B_R^{ds} keeping Z_s in G(eps_{M+1}, 0) and G(eps0, delta)."""

    def __init__(self, X_s, params, cfg, R=None):
        self.X = np.asarray(X_s, dtype=float)
        self.params = params
        self.cfg = cfg
        self.R = params.R if R is None else R
        if not is_well_separated(self.X, cfg.eps0):
            raise ParameterError("X_s must have all pairwise distances > eps0")

    def accepts(self, V):
        V = np.asarray(V, dtype=float)
        X = np.broadcast_to(self.X, V.shape)
        return is_good(X, V, self.params.eps[-1], 0.0) & is_good(X, V, self.cfg.eps0,
                                                                   self.cfg.delta)

    def sample(self, count, rng, max_batches=1000):
        s, d = self.X.shape
        out, tried, kept = [], 0, 0
        for _ in range(max_batches):
            V = self.R * _ball(rng, count, s * d).reshape(count, s, d)
            ok = self.accepts(V)
            tried += count
            kept += int(ok.sum())
            out.append(V[ok])
            if kept >= count:
                break
        rate = kept / tried
        if rate < self.cfg.acceptance_floor:
            raise ParameterError(f"velocity acceptance {rate:.2e} below floor; "
                                 "eta, eps0, delta violate the parameter ordering")
        return np.concatenate(out)[:count], rate


def good_config_filter(X_s, params, cfg, R=None):
    return GoodVelocitySampler(X_s, params, cfg, R)


# ---------------------------------------------------------------- pathological sets

FAMILIES = ("Omega", "U", "V", "A", "U*", "V*", "A*")


def _near_line(w, axis, radius):
    along = np.sum(w * axis, axis=-1)
    return np.sum(w * w, axis=-1) - along ** 2 <= radius ** 2


def _cone(a, b, gp):
    """|<a, b>| >= gp |a| |b| (the near-parallel set)."""
    return np.abs(np.sum(a * b, axis=-1)) >= gp * np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)


def bad_set_families(X, V, target, omega, vadj, gamma, eta):
    """Membership of each pathological family, batched.

    X, V: (n, m, d) stage; target: (n,) indices; omega, vadj: (n, l, d).
    The cylinder K_eta^{d,j} has radius eta and axis through v_j along
    x_j - x_target.
    """
    n, m, d = X.shape
    ell = omega.shape[1]
    rows = np.arange(n)
    vbar = V[rows, target]
    xbar = X[rows, target]
    gp = math.sqrt(max(0.0, 1.0 - gamma))
    root = math.sqrt(gamma)
    post = cc.collide(omega, np.concatenate([vbar[:, None, :], vadj], axis=1), tol=None)
    vbar_s, vadj_s = post[:, 0], post[:, 1:]
    pairs = list(itertools.combinations(range(ell), 2))
    out = {f: np.zeros(n, dtype=bool) for f in FAMILIES}

    out["Omega"] = np.any(np.linalg.norm(omega, axis=-1) <= root, axis=1) if gamma > 0 else out["Omega"]
    for i, j in pairs:
        if gamma > 0:
            out["Omega"] |= np.linalg.norm(omega[:, i] - omega[:, j], axis=-1) <= root

    for star, vb, va in (("", vbar, vadj), ("*", vbar_s, vadj_s)):
        rel = va - vb[:, None, :]
        vset = np.any(np.linalg.norm(rel, axis=-1) < eta, axis=1)
        aset = np.any(_cone(omega, rel, gp), axis=1)
        for i, j in pairs:
            dv = va[:, i] - va[:, j]
            vset |= np.linalg.norm(dv, axis=-1) < eta
            aset |= _cone(omega[:, i] - omega[:, j], dv, gp)
        uset = np.zeros(n, dtype=bool)
        for other in range(m):
            mask = target != other
            axis = X[:, other] - xbar
            norm = np.linalg.norm(axis, axis=-1, keepdims=True)
            axis = axis / np.where(norm > 0, norm, 1.0)
            vj = V[:, other]
            hit = np.any(_near_line(va - vj[:, None, :], axis[:, None, :], eta), axis=1)
            if star:
                hit |= _near_line(vb - vj, axis, eta)
            uset |= mask & hit
        out["V" + star] = vset
        out["A" + star] = aset
        out["U" + star] = uset
    return out


def bad_set_union(families):
    total = np.zeros_like(next(iter(families.values())))
    for v in families.values():
        total = total | v
    return total


def gamma_of(params, ell):
    """gamma = eps_l / eps_{l+1}, and 0 for binary adjunctions."""
    return 0.0 if ell == 1 else params.zone(ell - 1) / params.zone(ell)


def bad_set_membership(stage, target, ell, omega, vadj, params, eta):
    """True iff the adjunction candidate lies in one of the pathological families."""
    omega = np.asarray(omega, dtype=float).reshape(1, ell, -1)
    vadj = np.asarray(vadj, dtype=float).reshape(1, ell, -1)
    fam = bad_set_families(stage.X[None], stage.V[None], np.array([target]), omega, vadj,
                           gamma_of(params, ell), eta)
    return bool(bad_set_union(fam)[0])


def bad_set_measures(stage, target, ell, d, gamma, eta, count, rng, R=1.0, chunk=200_000):
    """Normalized measure of each family and of their union over (E x B_R^{ld})^+.

    Samples omega on the ellipsoid and the adjoined block uniformly in the
    ld-ball, restricted to b > 0 by flipping omega.
    """
    E = BlockEllipsoid.canonical(ell, d)
    sums = {f: 0.0 for f in FAMILIES + ("union",)}
    done = 0
    vbar = stage.V[target]
    while done < count:
        n = min(chunk, count - done)
        om = sample_ellipsoid(E, n, rng)
        va = R * _ball(rng, n, ell * d).reshape(n, ell, d)
        b = cc.cross_section(om, va - vbar)
        om = np.where((b < 0)[:, None, None], -om, om)
        X = np.broadcast_to(stage.X, (n,) + stage.X.shape)
        V = np.broadcast_to(stage.V, (n,) + stage.V.shape)
        fam = bad_set_families(X, V, np.full(n, target), om, va, gamma, eta)
        for f, v in fam.items():
            sums[f] += v.sum()
        sums["union"] += bad_set_union(fam).sum()
        done += n
    return {f: McEstimate.from_sums(v, v, count) for f, v in sums.items()}


def bad_envelope(m, R, ell, d, eta):
    """m R^{l d} eta^{(d-1)/(2 l d + 2)}."""
    return m * R ** (ell * d) * eta ** ((d - 1) / (2 * ell * d + 2))


# ---------------------------------------------------------------- samplers

def _ball(rng, count, dim):
    """Uniform points in the unit dim-ball."""
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.random((count, 1)) ** (1.0 / dim)


def _ball_volume(dim, R):
    return math.pi ** (dim / 2) / math.gamma(dim / 2 + 1) * R ** dim


def _velocity_block(rng, count, rows, d, R, beta):
    """Velocities for a block of particles in B_R^{rows d} and 1/q (inverse proposal density)."""
    dim = rows * d
    if beta is None:
        v = R * _ball(rng, count, dim)
        inv_q = np.full(count, _ball_volume(dim, R))
    else:
        v = rng.standard_normal((count, dim)) / math.sqrt(beta)
        sq = np.sum(v * v, axis=1)
        inv_q = (2 * math.pi / beta) ** (dim / 2) * np.exp(0.5 * beta * sq)
        inv_q = np.where(sq <= R * R, inv_q, 0.0)
    return v.reshape(count, rows, d), inv_q


# ---------------------------------------------------------------- observables

def _stratum(phi, f0, X_s, sigma, t, params, cfg, count, rng, R, coincide=False):
    """Per-sample contributions of one sigma stratum for both variants (CRN).

    Returns arrays (boltzmann, bbgky), each of shape (count,).
    """
    s, d = X_s.shape
    k = len(sigma)
    M = params.M
    Vs, inv_q = _velocity_block(rng, count, s, d, R, f0.beta)
    X = np.broadcast_to(X_s, (count, s, d)).copy()
    base = inv_q * phi(Vs)
    if cfg.velocity_filter and s > 1:
        base = base * GoodVelocitySampler(X_s, params, cfg, R).accepts(Vs)
    if k == 0:
        vals = base * np.prod(f0(X - t * Vs, Vs), axis=1)
        return vals, vals.copy()
    if simplex_volume(k, t, cfg.delta) == 0:
        return np.zeros(count), np.zeros(count)
    times = sample_times(k, t, cfg.delta, count, rng)
    tilde = np.concatenate([[0], np.cumsum(sigma)])
    targets = np.stack([rng.integers(0, s + tilde[i], size=count) for i in range(k)], axis=1)
    omegas, vadj, factor = [], [], np.ones(count)
    for sg in sigma:
        E = BlockEllipsoid.canonical(sg, d)
        omegas.append(sample_ellipsoid(E, count, rng))
        va, iq = _velocity_block(rng, count, sg, d, R, f0.beta)
        vadj.append(va)
        factor = factor * iq * ellipsoid_surface_measure(E) / 2.0
    volume = simplex_volume(k, t, cfg.delta) * M ** k * float(np.prod([s + tilde[i] for i in range(k)]))
    w_inf = float(np.prod([1.0 / math.factorial(sg) for sg in sigma]))
    if coincide:
        w_N, offs = w_inf, [0.0] * k
    else:
        w_N = float(np.prod([bbgky_prefactor(params, sg, s + tilde[i])
                             for i, sg in enumerate(sigma)]))
        offs = [params.zone(sg) for sg in sigma]
    bad_fn = None
    if cfg.exclude_bad:
        def bad_fn(Xc, Vc, tgt, om, va, ell):
            return bad_set_union(bad_set_families(Xc, Vc, tgt, om, va, gamma_of(params, ell),
                                                  cfg.eta))
    out_inf = np.zeros(count)
    out_N = np.zeros(count)
    for J in itertools.product((-1, 1), repeat=k):
        Xi, Vi, bv, bad, used, _, _ = _propagate(X, Vs, t, times, sigma, J, targets, omegas,
                                                 vadj, [0.0] * k, orient=True, bad_fn=bad_fn)
        XN, _, _, _, _, _, _ = _propagate(X, Vs, t, times, sigma, J, targets, used, vadj, offs)
        common = float(np.prod(J)) * base * factor * volume * np.prod(bv, axis=0) * ~bad
        common = common * (0.5 * np.sum(Vi * Vi, axis=(1, 2)) <= R * R)
        out_inf += common * w_inf * np.prod(f0(Xi, Vi), axis=1)
        out_N += common * w_N * np.prod(f0(XN, Vi), axis=1)
    return out_inf, out_N


def _strata_estimates(phi, f0, X_s, k, t, params, cfg, n_samples, seed, key, R,
                      threads=None, coincide=False):
    """Sum over sigma strata of per-stratum means, for boltzmann, bbgky and their difference.

    Samples are allocated across strata in proportion to prod 1/sigma_i!.
    """
    X_s = np.asarray(X_s, dtype=float)
    strata = sigma_sequences(k, params.M) if k else [()]
    weights = np.array([np.prod([1.0 / math.factorial(sg) for sg in sigma]) for sigma in strata])
    alloc = [max(2, int(round(n_samples * w / weights.sum()))) for w in weights]
    totals = {"boltzmann": [0.0, 0.0], "bbgky": [0.0, 0.0], "difference": [0.0, 0.0]}
    for idx, (sigma, per) in enumerate(zip(strata, alloc)):
        sizes = shard_sizes(per, math.ceil(per / SHARD))

        def run(rng, n, sigma=sigma):
            a, b = _stratum(phi, f0, X_s, sigma, t, params, cfg, n, rng, R, coincide)
            return [(x.sum(), (x * x).sum()) for x in (a, b, b - a)]

        parts = map_shards(run, sizes, seed, key=(key * 1000 + idx), threads=threads)
        for j, name in enumerate(("boltzmann", "bbgky", "difference")):
            s1 = sum(p[j][0] for p in parts)
            s2 = sum(p[j][1] for p in parts)
            est = McEstimate.from_sums(s1, s2, per)
            totals[name][0] += est.value
            totals[name][1] += est.stderr ** 2
    n_total = sum(alloc)
    return {name: McEstimate(v, math.sqrt(var), n_total) for name, (v, var) in totals.items()}


def elementary_observable(phi, f0, X_s, k, t, params, cfg=None, variant="boltzmann",
                          n_samples=100_000, seed=0, R=None, threads=None, coincide=False,
                          check_time=True):
    """Monte Carlo estimate of the k-collision term of the observable at positions X_s.

    variant is 'boltzmann', 'bbgky', 'difference' (bbgky minus boltzmann under
    common random numbers) or 'all' (a dict of the three).
    """
    cfg = HierarchyConfig() if cfg is None else cfg
    X_s = np.asarray(X_s, dtype=float)
    s = X_s.shape[0]
    if k >= params.n_trunc and k > 0:
        raise ValueError("k must be below the truncation depth n")
    if check_time and t > lwp_constants(params, cfg.C_d)["T"]:
        raise ValueError("t exceeds the existence time T")
    R = params.R if R is None else R
    if t <= (k + 1) * cfg.delta:
        zero = McEstimate(0.0, 0.0, n_samples)
        res = {"boltzmann": zero, "bbgky": zero, "difference": zero}
    else:
        res = _strata_estimates(phi, f0, X_s, k, t, params, cfg, n_samples, seed,
                                key=k + 10 * s, R=R, threads=threads, coincide=coincide)
    return res if variant == "all" else res[variant]


@dataclass
class SeriesResult:
    total: McEstimate
    terms: list
    remainder_bound: float
    envelope: float


def observable_series(phi, f0, X_s, t, params, cfg=None, variant="boltzmann",
                      n_samples=100_000, seed=0, depth=None, R=None, threads=None,
                      coincide=False):
    """Sum of the terms k = 0..depth with per-term estimates and the tail bound 2^-(n+1) C."""
    cfg = HierarchyConfig() if cfg is None else cfg
    depth = params.n_trunc - 1 if depth is None else depth
    X_s = np.asarray(X_s, dtype=float)
    s = X_s.shape[0]
    C = term_envelope(params, s, getattr(phi, "sup", 1.0), f0.weighted_sup or 1.0)
    all_terms = [elementary_observable(phi, f0, X_s, k, t, params, cfg, "all", n_samples,
                                       seed, R, threads, coincide, check_time=(k == 0))
                 for k in range(depth + 1)]
    names = ("boltzmann", "bbgky", "difference")

    def combine(terms):
        return McEstimate(sum(e.value for e in terms),
                          math.sqrt(sum(e.stderr ** 2 for e in terms)),
                          sum(e.samples for e in terms))

    if variant == "all":
        return {n: SeriesResult(combine([t_[n] for t_ in all_terms]),
                                [t_[n] for t_ in all_terms], 2.0 ** -(depth + 1) * C, C)
                for n in names}
    terms = [t_[variant] for t_ in all_terms]
    return SeriesResult(combine(terms), terms, 2.0 ** -(depth + 1) * C, C)


def convergence_experiment(phi, f0, probes, t, N_sequence, template, cfg=None,
                           n_samples=100_000, seed=0, depth=None, threads=None):
    """|I^N - I^inf| per N, maximised over probe positions, with common random numbers.

    template holds keyword arguments of make_scaled_params other than N.
    """
    cfg = HierarchyConfig() if cfg is None else cfg
    rows = []
    for N in N_sequence:
        start = _time.perf_counter()
        params = make_scaled_params(N=N, **template)
        best = None
        for X_s in probes:
            res = observable_series(phi, f0, X_s, t, params, cfg, "all", n_samples, seed,
                                    depth, threads=threads)
            diff = res["difference"].total
            if best is None or abs(diff.value) > abs(best[0].value):
                best = (diff, res["bbgky"].total, res["boltzmann"].total)
        rows.append({"N": N, "difference": abs(best[0].value), "stderr": best[0].stderr,
                     "bbgky": best[1].value, "boltzmann": best[2].value,
                     "samples": best[0].samples,
                     "wallclock": _time.perf_counter() - start})
    return rows


# ---------------------------------------------------------------- collision operator

def _q_samples(f, ell, x, v, d, count, rng, R, beta):
    """Per-sample values of the Q integrand estimator at (x, v) with v of shape (count, d)."""
    E = BlockEllipsoid.canonical(ell, d)
    om = sample_ellipsoid(E, count, rng)
    va, inv_q = _velocity_block(rng, count, ell, d, R, beta)
    b = cc.cross_section(om, va - v[:, None, :])
    om = np.where((b < 0)[:, None, None], -om, om)
    tup = np.concatenate([v[:, None, :], va], axis=1)
    post = cc.collide(om, tup, tol=None)
    xx = np.broadcast_to(x, tup.shape)
    gain = np.prod(f(xx, post), axis=1)
    loss = np.prod(f(xx, tup), axis=1)
    weight = ellipsoid_surface_measure(E) / 2.0 * np.abs(b) * inv_q
    return weight * (gain - loss), weight * (np.abs(gain) + np.abs(loss))


def collision_operator_Q(f, ell, x, v, params, n_samples, rng, R=None, beta=None):
    """Estimate of Q_{l+1}(f, ..., f)(x, v) over E x B_R^{ld}.

    The reported stderr combines the sampling error with a floating-point
    floor of ROUNDING_ULPS ulps of the mean |gain| + |loss| magnitude: gain
    and loss cancel exactly at a Maxwellian only in exact arithmetic.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    R = params.R if R is None else R
    beta = getattr(f, "beta", None) if beta is None else beta
    vv = np.broadcast_to(v, (n_samples, v.shape[-1]))
    vals, scale = _q_samples(f, ell, x, vv, v.shape[-1], n_samples, rng, R, beta)
    est = McEstimate.from_values(vals)
    floor = ROUNDING_ULPS * np.finfo(float).eps * float(np.mean(scale))
    return McEstimate(est.value, math.hypot(est.stderr, floor), est.samples)


def integrate_Q(psi, f, ell, x, params, n_samples, rng, R=None, beta=1.0):
    """Estimate of the integral of psi(v) Q_{l+1}(f)(x, v) over v, with a Gaussian proposal for v."""
    d = params.d
    R = params.R if R is None else R
    v = rng.standard_normal((n_samples, d)) / math.sqrt(beta)
    inv_q = (2 * math.pi / beta) ** (d / 2) * np.exp(0.5 * beta * np.sum(v * v, axis=1))
    vals = psi(v) * inv_q * _q_samples(f, ell, np.asarray(x, dtype=float), v, d, n_samples,
                                       rng, R, getattr(f, "beta", None))[0]
    return McEstimate.from_values(vals)


# ---------------------------------------------------------------- product-solution oracle

def _compositions(total, parts):
    if parts == 1:
        return [(total,)]
    return [(h,) + rest for h in range(total + 1) for rest in _compositions(total - h, parts - 1)]


def _f_term(f0, k, t, x, v, params, rng, R):
    """Unbiased estimate of the k-collision Picard term f_k(t, x, v), batched over rows."""
    n, d = x.shape
    if k == 0:
        return f0(x - t[:, None] * v, v)
    out = np.zeros(n)
    M = params.M
    ell_pick = rng.integers(1, M + 1, size=n)
    tau = rng.random(n) * t
    y = x - (t - tau)[:, None] * v
    for ell in range(1, M + 1):
        idx = np.nonzero(ell_pick == ell)[0]
        if not len(idx):
            continue
        comps = _compositions(k - 1, ell + 1)
        pick = rng.integers(0, len(comps), size=len(idx))
        E = BlockEllipsoid.canonical(ell, d)
        for c_i, comp in enumerate(comps):
            sub = idx[pick == c_i]
            m = len(sub)
            if not m:
                continue
            om = sample_ellipsoid(E, m, rng)
            va, inv_q = _velocity_block(rng, m, ell, d, R, f0.beta)
            vm = v[sub]
            b = cc.cross_section(om, va - vm[:, None, :])
            om = np.where((b < 0)[:, None, None], -om, om)
            tup = np.concatenate([vm[:, None, :], va], axis=1)
            post = cc.collide(om, tup, tol=None)
            gain = np.ones(m)
            loss = np.ones(m)
            for slot, kk in enumerate(comp):
                gain *= _f_term(f0, kk, tau[sub], y[sub], post[:, slot], params, rng, R)
                loss *= _f_term(f0, kk, tau[sub], y[sub], tup[:, slot], params, rng, R)
            weight = (t[sub] * M * len(comps) / math.factorial(ell)
                      * ellipsoid_surface_measure(E) / 2.0 * np.abs(b) * inv_q)
            out[sub] = weight * (gain - loss)
    return out


def product_solution_observable(phi, f0, x, t, params, depth, n_samples, rng, R=None):
    """Integral of phi(v) sum_{k<=depth} f_k(t, x, v) dv for the one-particle Picard expansion.

    Built by recursive Monte Carlo of the Duhamel/Picard formula for the
    Boltzmann equation; independent of the pseudo-trajectory code.
    """
    R = params.R if R is None else R
    d = params.d
    x = np.broadcast_to(np.asarray(x, dtype=float).reshape(-1)[:d], (n_samples, d)).copy()
    V, inv_q = _velocity_block(rng, n_samples, 1, d, R, f0.beta)
    v = V[:, 0]
    tt = np.full(n_samples, float(t))
    weight = inv_q * phi(V)
    total = np.zeros(n_samples)
    per_k = []
    for k in range(depth + 1):
        vals = weight * _f_term(f0, k, tt, x, v, params, rng, R)
        per_k.append(McEstimate.from_values(vals))
        total += vals
    return McEstimate.from_values(total), per_k
