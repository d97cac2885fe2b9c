"""Shared value types, parameter validation and the N <-> interaction-zone scaling."""

import functools
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np


class ParameterError(ValueError):
    """Raised when a parameter set violates an ordering invariant."""


@dataclass(frozen=True)
class SystemParams:
    """Physical and truncation parameters of an M+1-nary hard-sphere system.

    eps holds (eps_2, ..., eps_{M+1}); eps[l-1] is the zone of an (l+1)-tuple.
    """

    d: int
    M: int
    N: int
    eps: tuple
    delta: float
    R: float
    rho: float
    beta0: float = 1.0
    mu0: float = 0.0
    n_trunc: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))

    def zone(self, ell):
        """Interaction zone eps_{ell+1} for an (ell+1)-tuple."""
        return self.eps[ell - 1]

    def validate(self, ratio_max=0.1, delta_max_frac=0.01):
        """Check the ordering invariants, raising ParameterError on failure."""
        if self.d < 2:
            raise ParameterError("dimension must be >= 2")
        if self.M < 1:
            raise ParameterError("M must be >= 1")
        if len(self.eps) != self.M:
            raise ParameterError(f"expected {self.M} interaction zones, got {len(self.eps)}")
        if self.N < self.M + 1:
            raise ParameterError("need N >= M + 1")
        eps = np.asarray(self.eps)
        if np.any(eps <= 0) or eps[-1] >= 1:
            raise ParameterError("interaction zones must lie in (0, 1)")
        for lo, hi in zip(eps[:-1], eps[1:]):
            if not lo < hi:
                raise ParameterError("interaction zones must be strictly increasing")
            if lo / hi > ratio_max:
                raise ParameterError(
                    f"zone ratio {lo / hi:.3g} exceeds ratio_max={ratio_max}; "
                    "N too small for the requested scale separation")
        if not 0 < self.delta <= delta_max_frac * eps[0]:
            raise ParameterError("delta must satisfy 0 < delta <= %g * eps_2" % delta_max_frac)
        if self.R < 1 or not self.rho > self.R:
            raise ParameterError("need R >= 1 and rho > R")
        if self.beta0 <= 0:
            raise ParameterError("beta0 must be positive")
        return self

    def to_dict(self):
        return {"d": self.d, "M": self.M, "N": self.N, "eps": list(self.eps),
                "delta": self.delta, "R": self.R, "rho": self.rho, "beta0": self.beta0,
                "mu0": self.mu0, "n_trunc": self.n_trunc, "seed": self.seed}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        keys = {"d", "M", "N", "eps", "delta", "R", "rho", "beta0", "mu0", "n_trunc", "seed"}
        unknown = set(doc) - keys
        if unknown:
            raise ParameterError(f"unknown parameter keys: {sorted(unknown)}")
        missing = keys - set(doc)
        if missing:
            raise ParameterError(f"missing parameter keys: {sorted(missing)}")
        return cls(d=int(doc["d"]), M=int(doc["M"]), N=int(doc["N"]), eps=tuple(doc["eps"]),
                   delta=float(doc["delta"]), R=float(doc["R"]), rho=float(doc["rho"]),
                   beta0=float(doc["beta0"]), mu0=float(doc["mu0"]),
                   n_trunc=int(doc["n_trunc"]), seed=int(doc["seed"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def scaled_zone(d, ell, N, scaling="factorial"):
    """eps_{ell+1} solving N eps^(d - 1/ell) = 1/ell! (or = 1 for scaling='unit')."""
    target = 1.0 / math.factorial(ell) if scaling == "factorial" else 1.0
    if scaling not in ("factorial", "unit"):
        raise ValueError(f"unknown scaling {scaling!r}")
    return (N / target) ** (-1.0 / (d - 1.0 / ell))


def make_scaled_params(d, M, N, delta_frac=0.01, R=4.0, rho=8.0, beta0=1.0, mu0=0.0,
                       n_trunc=2, seed=0, scaling="factorial", ratio_max=0.1):
    """Build SystemParams with every zone tied to N by the scaling law.

    delta is delta_frac * eps_2. With scaling='factorial' the zones satisfy
    N eps_{l+1}^(d-1/l) = 1/l!; 'unit' uses N eps_{l+1}^(d-1/l) = 1, under
    which the BBGKY prefactor tends to 1/l!.
    """
    if d < 2 or M < 1 or N < M + 1:
        raise ParameterError("need d >= 2, M >= 1 and N >= M + 1")
    eps = tuple(scaled_zone(d, ell, N, scaling) for ell in range(1, M + 1))
    params = SystemParams(d=d, M=M, N=N, eps=eps, delta=delta_frac * eps[0], R=R, rho=rho,
                          beta0=beta0, mu0=mu0, n_trunc=n_trunc, seed=seed)
    return params.validate(ratio_max=ratio_max)


def symmetric_distance(points):
    """sqrt(sum_{i<j} |x_i - x_j|^2) over the leading point axis; batches allowed.

    points has shape (..., l+1, d). Uses the centred identity
    sum_{i<j}|x_i - x_j|^2 = n sum_i |x_i - xbar|^2.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[-2]
    centred = pts - pts.mean(axis=-2, keepdims=True)
    return np.sqrt(n * np.sum(centred ** 2, axis=(-2, -1)))


@dataclass
class PhaseConfig:
    """Positions X and velocities V of m particles, each of shape (m, d)."""

    X: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.X = np.array(self.X, dtype=float, ndmin=2)
        self.V = np.array(self.V, dtype=float, ndmin=2)
        if self.X.shape != self.V.shape:
            raise ValueError("X and V must have the same shape")

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def copy(self):
        return PhaseConfig(self.X.copy(), self.V.copy())

    def kinetic_energy(self):
        return 0.5 * float(np.sum(self.V ** 2))


@functools.lru_cache(maxsize=64)
def tuple_index_array(m, size):
    """All increasing index tuples of the given size as a read-only (n, size) int array."""
    if size > m:
        out = np.zeros((0, size), dtype=np.int64)
    else:
        out = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(m), size)),
                          dtype=np.int64).reshape(-1, size)
    out.flags.writeable = False
    return out


def in_phase_space(Z, params, rtol=0.0):
    """True iff every (l+1)-tuple with l <= min(m-1, M) has d_{l+1} >= eps_{l+1}.

    rtol relaxes the boundary test to d >= eps (1 - rtol).
    """
    X = Z.X
    # squared tuple distances are sums of pairwise squared distances
    D2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    for ell in range(1, min(Z.m - 1, params.M) + 1):
        idx = tuple_index_array(Z.m, ell + 1)
        if not len(idx):
            continue
        sq = sum(D2[idx[:, a], idx[:, b]] for a, b in itertools.combinations(range(ell + 1), 2))
        if np.any(np.sqrt(sq) < params.zone(ell) * (1.0 - rtol)):
            return False
    return True


@dataclass(frozen=True)
class ImpactParams:
    """Impact parameters omega (l, d) on the canonical ellipsoid plus adjoined velocities."""

    ell: int
    omega: np.ndarray
    adjoined_velocities: np.ndarray = None
    tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float, ndmin=2)
        object.__setattr__(self, "omega", omega)
        if omega.shape[0] != self.ell:
            raise ValueError("omega must have ell rows")
        if self.adjoined_velocities is not None:
            v = np.array(self.adjoined_velocities, dtype=float, ndmin=2)
            if v.shape != omega.shape:
                raise ValueError("adjoined velocities must match omega in shape")
            object.__setattr__(self, "adjoined_velocities", v)
        total = self.ell + 1
        q = total * np.sum(omega ** 2) - np.sum(omega.sum(axis=0) ** 2)
        if abs(q - 1.0) > self.tol:
            raise ValueError(f"omega is off the ellipsoid (quadratic form {q!r})")


KINDS = ("precollisional", "postcollisional", "grazing")


@dataclass(frozen=True)
class CollisionEvent:
    """A boundary crossing of an (order)-tuple at the given time."""

    time: float
    order: int
    tuple: tuple
    kind: str = "precollisional"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if len(self.tuple) != self.order:
            raise ValueError("tuple length must equal the order")

    def to_json(self):
        return json.dumps({"t": self.time, "order": self.order,
                           "tuple": [int(i) for i in self.tuple], "kind": self.kind})
