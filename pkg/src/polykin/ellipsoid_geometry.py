"""Block ellipsoids, sphere maps, surface sampling and Monte Carlo set measures.

Surface integrals over an ellipsoid E are taken in the pushforward convention:
int_E g = |det T|^-1 int_S g(T^-1 y) dy, with T one of the slot-invariant maps
onto the unit sphere. McEstimate values are the normalised fraction
int_E 1_A / int_E 1, which is the same for every slot-invariant map.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .collision_core import ellipsoid_matrix

DEFAULT_CHUNK = 200_000


@dataclass(frozen=True)
class BlockEllipsoid:
    """{x in R^{ld} : <x, (A kron I_d) x> = c} for a symmetric positive-definite A."""

    ell: int
    d: int
    A: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        if A.shape != (self.ell, self.ell):
            raise ValueError("A must be l x l")
        if not np.allclose(A, A.T, rtol=0, atol=1e-14 * max(1.0, np.abs(A).max())):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ValueError("A must be positive definite")
        if not self.c > 0:
            raise ValueError("level constant must be positive")
        object.__setattr__(self, "A", A)

    @classmethod
    def canonical(cls, ell, d):
        return cls(ell, d, ellipsoid_matrix(ell), 1.0)

    def form(self, x):
        """<x, A x> for points of shape (..., l, d)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("...id,ij,...jd->...", x, self.A, x)

    def transformed(self, S):
        """Image of the ellipsoid under the invertible block map S (l x l coefficients)."""
        Sinv = np.linalg.inv(np.asarray(S, dtype=float))
        A = Sinv.T @ self.A @ Sinv
        return BlockEllipsoid(self.ell, self.d, 0.5 * (A + A.T), self.c)


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    samples: int

    @classmethod
    def from_values(cls, values):
        values = np.asarray(values, dtype=float)
        n = values.size
        if n == 0:
            raise ValueError("no samples")
        sd = values.std(ddof=1) if n > 1 else 0.0
        return cls(float(values.mean()), float(sd / math.sqrt(n)), int(n))

    @classmethod
    def from_sums(cls, total, total_sq, n):
        """Build from running sums; merges of shards add their sums."""
        mean = total / n
        var = max(total_sq / n - mean * mean, 0.0) * n / max(n - 1, 1)
        return cls(float(mean), float(math.sqrt(var / n)), int(n))

    def scaled(self, factor):
        return McEstimate(self.value * factor, self.stderr * abs(factor), self.samples)


def factor_map(E):
    """Lower-triangular L (l x l coefficients) with L^T L = A.

    Obtained by a Cholesky factorisation of the index-reversed matrix, so the
    first slot is mapped to a multiple of itself: y = L x / sqrt(c) sends E to
    the unit sphere and sqrt(c) L^-1 maps the sphere back onto E.
    """
    A = np.asarray(E.A if isinstance(E, BlockEllipsoid) else E, dtype=float)
    if np.linalg.eigvalsh(A).min() <= 0:
        raise ValueError("A must be positive definite")
    P = np.eye(A.shape[0])[::-1]
    C = np.linalg.cholesky(P @ A @ P)
    U = P @ C @ P
    return U.T


@dataclass(frozen=True)
class SphereMap:
    """T_i(x) = Q L_i P x / sqrt(c): E -> unit sphere, with slot i kept up to scale."""

    E: BlockEllipsoid
    slot: int
    coef: np.ndarray

    @property
    def scale(self):
        """k > 0 with T_i(x)_i = k x_i."""
        return float(self.coef[self.slot - 1, self.slot - 1])

    @property
    def det(self):
        return float(abs(np.linalg.det(self.coef)) ** self.E.d)

    def matrix(self):
        return np.kron(self.coef, np.eye(self.E.d))

    def __call__(self, x):
        return np.einsum("ij,...jd->...id", self.coef, np.asarray(x, dtype=float))

    def inverse(self, y):
        inv = np.linalg.inv(self.coef)
        return np.einsum("ij,...jd->...id", inv, np.asarray(y, dtype=float))


def slot_invariant_sphere_map(E, i):
    """Invertible map of E onto the unit sphere whose slot i is a scalar multiple of x_i."""
    if not 1 <= i <= E.ell:
        raise IndexError("slot index must lie in 1..l")
    order = [i - 1] + [j for j in range(E.ell) if j != i - 1]
    P = np.eye(E.ell)[order]
    L = factor_map(P @ E.A @ P.T)
    coef = P.T @ L @ P / math.sqrt(E.c)
    return SphereMap(E, i, coef)


def ellipsoid_surface_measure(E):
    """|det T|^-1 times the area of S^{ld-1}; total mass in the pushforward convention."""
    n = E.ell * E.d
    sphere = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
    return sphere / slot_invariant_sphere_map(E, 1).det


def sample_sphere(n_dim, count, rng):
    y = rng.standard_normal((count, n_dim))
    return y / np.linalg.norm(y, axis=1, keepdims=True)


def sample_ellipsoid(E, count, rng):
    """Points on E distributed as the pushforward of uniform sphere measure."""
    y = sample_sphere(E.ell * E.d, count, rng).reshape(count, E.ell, E.d)
    return slot_invariant_sphere_map(E, 1).inverse(y)


def _chunked_values(E, fn, count, rng, chunk):
    values = np.empty(count)
    done = 0
    while done < count:
        n = min(chunk, count - done)
        values[done:done + n] = fn(sample_ellipsoid(E, n, rng))
        done += n
    return values


def mc_set_measure(E, indicator, count, rng, chunk=DEFAULT_CHUNK):
    """Normalised E-measure of {x : indicator(x)} from count samples."""
    return McEstimate.from_values(
        _chunked_values(E, lambda x: np.asarray(indicator(x), dtype=float), count, rng, chunk))


def mc_expectation(E, fn, count, rng, chunk=DEFAULT_CHUNK):
    """Normalised E-average of a real function (used by conditional estimators)."""
    return McEstimate.from_values(_chunked_values(E, fn, count, rng, chunk))


def _unit(vec):
    vec = np.asarray(vec, dtype=float)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("direction vector must be nonzero")
    return vec / norm


def _rng(rng, seed):
    return rng if rng is not None else np.random.default_rng(seed)


def estimate_cap(E, alpha, nu_vec, count, slot=1, rng=None, seed=0):
    """Measure of {omega : |<omega_i, nu>| >= alpha |omega_i| |nu|}."""
    nu = _unit(nu_vec)
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")

    def indicator(x):
        w = x[:, slot - 1, :]
        return np.abs(w @ nu) >= alpha * np.linalg.norm(w, axis=1)

    return mc_set_measure(E, indicator, count, _rng(rng, seed))


def estimate_pair_cone(E, alpha, nu_vec, count, slots=(1, 2), rng=None, seed=0):
    """Measure of {omega : <omega_1 - omega_2, nu> >= alpha |omega_1 - omega_2| |nu|}."""
    if E.ell < 2:
        raise ValueError("pair cone needs l >= 2")
    nu = _unit(nu_vec)
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    a, b = slots

    def indicator(x):
        w = x[:, a - 1, :] - x[:, b - 1, :]
        return w @ nu >= alpha * np.linalg.norm(w, axis=1)

    return mc_set_measure(E, indicator, count, _rng(rng, seed))


def direction_within(d, half_width_over_radius):
    """P(dist(u, line) <= t) for u uniform on S^{d-1} and a line through the origin.

    Equals P(|cos theta| >= sqrt(1 - t^2)) = I_{t^2}((d-1)/2, 1/2).
    """
    t2 = np.clip(np.asarray(half_width_over_radius, dtype=float) ** 2, 0.0, 1.0)
    return special.betainc((d - 1) / 2.0, 0.5, t2)


def estimate_cylinder(E, rho, count, axis=None, slot=1, rng=None, seed=0, method="conditional"):
    """Measure of {omega : omega_slot in K_rho}, K_rho the radius-rho tube about a line.

    The line passes through the origin along axis. The 'conditional' method
    averages, over sampled |omega_slot|, the exact probability that a uniform
    direction falls in the tube; it is unbiased because the canonical
    ellipsoid law is invariant under simultaneous rotation of all slots.
    'indicator' counts hits directly and works for any ellipsoid.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    d = E.d
    axis = _unit(np.eye(d)[0] if axis is None else axis)

    if method == "conditional":
        def value(x):
            s = np.linalg.norm(x[:, slot - 1, :], axis=1)
            with np.errstate(divide="ignore"):
                ratio = np.where(s > rho, rho / np.where(s > 0, s, 1.0), 1.0)
            return direction_within(d, ratio)

        return mc_expectation(E, value, count, _rng(rng, seed))

    def indicator(x):
        w = x[:, slot - 1, :]
        along = w @ axis
        return np.sum(w * w, axis=1) - along ** 2 <= rho ** 2

    return mc_set_measure(E, indicator, count, _rng(rng, seed))


def estimate_ball(E, rho, count, slot=1, rng=None, seed=0):
    """Measure of {omega : |omega_slot| <= rho}."""
    return mc_set_measure(E, lambda x: np.linalg.norm(x[:, slot - 1, :], axis=1) <= rho,
                          count, _rng(rng, seed))


def ball_and_cylinder(E, rho, count, slot=1, rng=None, seed=0):
    """Per-sample ball indicator and cylinder conditional value on shared samples."""
    x = sample_ellipsoid(E, count, _rng(rng, seed))
    s = np.linalg.norm(x[:, slot - 1, :], axis=1)
    ball = (s <= rho).astype(float)
    ratio = np.where(s > rho, rho / np.where(s > 0, s, 1.0), 1.0)
    cyl = direction_within(E.d, ratio)
    return ball, cyl


def estimate_strip(E, rho, mu, lam, count, rng=None, seed=0):
    """Measure of {omega : |mu omega_1 - lam omega_2| <= rho}."""
    if mu == 0 or lam == 0:
        raise ValueError("mu and lambda must be nonzero")
    if E.ell < 2:
        raise ValueError("strip needs l >= 2")
    return mc_set_measure(
        E, lambda x: np.linalg.norm(mu * x[:, 0, :] - lam * x[:, 1, :], axis=1) <= rho,
        count, _rng(rng, seed))


def estimate_annulus(E, A_form, rho, beta, count, rng=None, seed=0):
    """Measure of {omega : rho - beta <= <omega, A_form omega> <= rho + beta}."""
    B = np.asarray(A_form, dtype=float)
    if B.shape != (E.ell, E.ell) or not np.allclose(B, B.T):
        raise ValueError("A_form must be a symmetric l x l block-coefficient matrix")
    if not np.any(B):
        raise ValueError("A_form must be nonzero")
    scale = np.sum(B * E.A) / np.sum(E.A * E.A)
    if np.allclose(B, scale * E.A, rtol=1e-12, atol=1e-12):
        raise ValueError("A_form is proportional to the ellipsoid's own form")

    def indicator(x):
        q = np.einsum("nid,ij,njd->n", x, B, x)
        return np.abs(q - rho) <= beta

    return mc_set_measure(E, indicator, count, _rng(rng, seed))


def fit_loglog_slope(x, y):
    """Ordinary least-squares slope of log y against log x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        raise ValueError("need at least two positive points to fit a slope")
    slope, _ = np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)
    return float(slope)
