"""The (l+1)-nary collision law, cross-section, classification and transition map.

Arrays follow the layout (..., l, d) for impact parameters and (..., l+1, d) for
velocity tuples, so every function accepts a leading batch axis.
"""

from dataclasses import dataclass

import numpy as np

GRAZING_TOL = 1e-12


def ellipsoid_matrix(ell):
    """Block-coefficient matrix (l+1) I - J of the canonical ellipsoid."""
    return (ell + 1) * np.eye(ell) - np.ones((ell, ell))


def quadratic_form(omega):
    """Psi(omega) = sum |w_i|^2 + sum_{i<j} |w_i - w_j|^2."""
    w = np.asarray(omega, dtype=float)
    ell = w.shape[-2]
    return (ell + 1) * np.sum(w * w, axis=(-2, -1)) - np.sum(w.sum(axis=-2) ** 2, axis=-1)


def cross_section(omega, nu):
    """b(omega, nu) = sum <w_i, n_i> + sum_{i<j} <w_i - w_j, n_i - n_j>."""
    w = np.asarray(omega, dtype=float)
    n = np.asarray(nu, dtype=float)
    ell = w.shape[-2]
    return ((ell + 1) * np.sum(w * n, axis=(-2, -1))
            - np.sum(w.sum(axis=-2) * n.sum(axis=-2), axis=-1))


def relative_velocities(V):
    """(v_2 - v_1, ..., v_{l+1} - v_1)."""
    V = np.asarray(V, dtype=float)
    return V[..., 1:, :] - V[..., :1, :]


def impact_coefficient(omega, V):
    """c(omega, V) = 2 b(omega, v_2 - v_1, ...) / (l+1)."""
    ell = np.shape(omega)[-2]
    return 2.0 * cross_section(omega, relative_velocities(V)) / (ell + 1)


def _check_on_ellipsoid(omega, tol):
    q = quadratic_form(omega)
    if np.any(np.abs(q - 1.0) > tol):
        raise ValueError("impact parameters are off the ellipsoid")


def collide(omega, V, tol=1e-10):
    """Apply the collisional transformation T_omega to a velocity tuple."""
    omega = np.asarray(omega, dtype=float)
    V = np.asarray(V, dtype=float)
    if omega.shape[-2] + 1 != V.shape[-2]:
        raise ValueError("velocity tuple must have l+1 entries")
    if tol is not None:
        _check_on_ellipsoid(omega, tol)
    ell = omega.shape[-2]
    c = impact_coefficient(omega, V)[..., None, None]
    total = omega.sum(axis=-2, keepdims=True)
    out = np.empty(np.broadcast_shapes(V.shape, omega.shape[:-2] + V.shape[-2:]))
    out[..., :1, :] = V[..., :1, :] + c * total
    out[..., 1:, :] = V[..., 1:, :] + c * (total - (ell + 1) * omega)
    return out


def classify_sign(omega, V, tol=GRAZING_TOL):
    """-1 for pre-collisional, +1 for post-collisional, 0 for grazing."""
    b = cross_section(omega, relative_velocities(V))
    return np.where(np.abs(b) <= tol, 0, np.sign(b)).astype(int)


def classify(omega, V, tol=GRAZING_TOL):
    """'pre', 'post' or 'grazing' from the sign of b(omega, v_2 - v_1, ...)."""
    return {-1: "pre", 0: "grazing", 1: "post"}[int(classify_sign(omega, V, tol))]


def relative_speed(V):
    """r = sqrt(sum_{i<j} |v_i - v_j|^2) over the whole tuple."""
    V = np.asarray(V, dtype=float)
    n = V.shape[-2]
    centred = V - V.mean(axis=-2, keepdims=True)
    return np.sqrt(n * np.sum(centred ** 2, axis=(-2, -1)))


@dataclass(frozen=True)
class TransitionOutput:
    nu: np.ndarray
    jacobian: float
    r: float


def transition_raw(V, omega):
    """r^-1 (v' + (l+1) c(omega, V) omega) with v' = (v_1 - v_2, ..., v_1 - v_{l+1}).

    Defined for every omega in R^{ld}; agrees with the post-collisional
    relative velocities divided by r whenever omega lies on the ellipsoid.
    """
    V = np.asarray(V, dtype=float)
    omega = np.asarray(omega, dtype=float)
    ell = omega.shape[-2]
    vprime = -relative_velocities(V)
    r = relative_speed(V)[..., None, None]
    c = impact_coefficient(omega, V)[..., None, None]
    return (vprime + (ell + 1) * c * omega) / r


def transition_jacobian(V, omega):
    """2 ((l+1) c / r)^(l d), the Jacobian determinant of transition_raw."""
    omega = np.asarray(omega, dtype=float)
    ell, d = omega.shape[-2:]
    c = impact_coefficient(omega, V)
    r = relative_speed(V)
    return 2.0 * ((ell + 1) * c / r) ** (ell * d)


def transition_map(V, omega):
    """Map admissible impact parameters to post-collisional relative velocity directions."""
    V = np.asarray(V, dtype=float)
    omega = np.asarray(omega, dtype=float)
    r = float(relative_speed(V))
    if r == 0:
        raise ValueError("degenerate velocity tuple: all velocities equal")
    if not quadratic_form(omega) < 1.5:
        raise ValueError("omega outside the admissible set (quadratic form >= 3/2)")
    if not cross_section(omega, relative_velocities(V)) > 0:
        raise ValueError("omega outside the admissible set (b <= 0)")
    return TransitionOutput(nu=transition_raw(V, omega),
                            jacobian=float(transition_jacobian(V, omega)), r=r)


def transition_inverse(nu, V, tol=1e-12):
    """Impact parameters omega with transition_map(V, omega).nu == nu."""
    nu = np.asarray(nu, dtype=float)
    V = np.asarray(V, dtype=float)
    ell = nu.shape[-2]
    r = float(relative_speed(V))
    if r == 0:
        raise ValueError("degenerate velocity tuple: all velocities equal")
    vprime = -relative_velocities(V)
    w = r * nu - vprime
    if np.sqrt(np.sum(w * w)) <= tol * r:
        raise ValueError("nu equals r^-1 v' and has no preimage")
    cw = impact_coefficient(w, V)
    if not cw > 0:
        raise ValueError("nu lies outside the image of the post-collisional hemisphere")
    # on the image Psi(w) = (l+1) c(w, V); the quadratic form is better conditioned near grazing
    return w / np.sqrt(quadratic_form(w))


def frame_map_matrix(ell, i, d=1):
    """Block matrix of S_i on R^{ld}; d=1 returns the l x l coefficient matrix.

    S_1 nu = (sum nu_j, nu_2, ..., nu_l); S_{i+1} replaces slot i by
    -l nu_i + sum_{j != i} nu_j.
    """
    if not 1 <= i <= ell + 1:
        raise IndexError("frame map index must lie in 1..l+1")
    coef = np.eye(ell)
    if i == 1:
        coef[0, :] = 1.0
    else:
        row = i - 2
        coef[row, :] = 1.0
        coef[row, row] = -float(ell)
    return np.kron(coef, np.eye(d))


def adjunction_frame_maps(ell, i, d=1):
    """The linear map S_i as a callable on arrays of shape (..., l, d), plus its matrix."""
    coef = frame_map_matrix(ell, i)

    def apply(nu):
        return np.einsum("ij,...jk->...ik", coef, np.asarray(nu, dtype=float))

    apply.matrix = frame_map_matrix(ell, i, d)
    apply.coef = coef
    return apply
