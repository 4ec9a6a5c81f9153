"""Balance-law systems: flux/source fields with derivatives and eigen-structure.

State arrays have shape (..., n); pointwise maps broadcast over leading axes.
Jacobians have shape (..., n, n) and Hessians (..., n, n, n) with
H[..., i, j, k] = d^2 f_i / du_j du_k.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NotStrictlyHyperbolic, NotLax, Characteristic

_FD_HESS_STEP = 1e-6


@dataclass(frozen=True)
class HyperbolicSystem:
    """A one-dimensional balance law u_t + f(u)_x = g(u).

    flux_hessian / source_hessian may be omitted; a centered finite
    difference of the corresponding Jacobian is used instead (good to
    about 1e-5 relative, enough for every use here since Hessian terms
    only enter second-order corrections).
    """
    n: int
    flux: Callable
    source: Callable
    flux_jacobian: Callable
    source_jacobian: Callable
    flux_hessian: Optional[Callable] = None
    source_hessian: Optional[Callable] = None
    name: str = ""

    def flux_hess(self, u):
        if self.flux_hessian is not None:
            return self.flux_hessian(u)
        return _fd_hessian(self.flux_jacobian, u, self.n)

    def source_hess(self, u):
        if self.source_hessian is not None:
            return self.source_hessian(u)
        return _fd_hessian(self.source_jacobian, u, self.n)


def _fd_hessian(jac, u, n):
    u = np.asarray(u, dtype=float)
    H = np.empty(u.shape[:-1] + (n, n, n))
    for k in range(n):
        du = np.zeros(n)
        du[k] = _FD_HESS_STEP
        H[..., :, :, k] = (jac(u + du) - jac(u - du)) / (2.0 * _FD_HESS_STEP)
    # symmetrize the last two slots (mixed partials commute)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def apply_bilinear(H, a, b):
    """Contract a Hessian tensor with two state vectors: H(a, b)."""
    return np.einsum('...ijk,...j,...k->...i', H, a, b)


def eigen_decompose(system: HyperbolicSystem, u):
    """Eigen-decomposition of df(u) with a deterministic convention.

    Returns (lams, P, Pinv) with lams ascending, columns of P unit length
    and signed so the first entry exceeding 1e-9 in magnitude is positive.
    Broadcasts over leading axes of u.
    """
    u = np.asarray(u, dtype=float)
    A = system.flux_jacobian(u)
    if system.n == 1:
        lams = A[..., 0]
        shape = u.shape[:-1]
        P = np.ones(shape + (1, 1))
        return lams, P, P.copy()

    w, V = np.linalg.eig(A)
    if np.iscomplexobj(w) and np.abs(w.imag).max() > 0:
        raise NotStrictlyHyperbolic("complex eigenvalues of flux Jacobian")
    w = w.real
    V = V.real
    order = np.argsort(w, axis=-1)
    lams = np.take_along_axis(w, order, axis=-1)
    P = np.take_along_axis(V, order[..., None, :], axis=-1)

    gaps = np.diff(lams, axis=-1)
    if gaps.size and gaps.min() < 1e-12:
        raise NotStrictlyHyperbolic(f"eigenvalue gap {gaps.min():.3e} < 1e-12")

    P = P / np.linalg.norm(P, axis=-2, keepdims=True)
    # sign convention: first entry of each column with |entry| > 1e-9 positive
    big = np.abs(P) > 1e-9
    first = np.argmax(big, axis=-2)
    lead = np.take_along_axis(P, first[..., None, :], axis=-2)[..., 0, :]
    P = P * np.where(lead < 0, -1.0, 1.0)[..., None, :]
    Pinv = np.linalg.inv(P)
    return lams, P, Pinv


def char_speeds(system: HyperbolicSystem, u):
    """Eigenvalues of df(u), ascending; broadcasts."""
    return eigen_decompose(system, u)[0]


def rankine_hugoniot_residual(system: HyperbolicSystem, u_minus, u_plus, s):
    u_minus = np.asarray(u_minus, dtype=float)
    u_plus = np.asarray(u_plus, dtype=float)
    return system.flux(u_plus) - system.flux(u_minus) - s * (u_plus - u_minus)


def lax_family(system: HyperbolicSystem, u_minus, u_plus, s):
    """Index k of the Lax family of the shock (1-based).

    Requires lam_{k-1}(u-) < s < lam_k(u-) and lam_k(u+) < s < lam_{k+1}(u+).
    """
    lm = char_speeds(system, u_minus)
    lp = char_speeds(system, u_plus)
    if min(np.abs(lm - s).min(), np.abs(lp - s).min()) < 1e-10:
        raise Characteristic("shock speed coincides with a characteristic speed")
    n = system.n
    found = None
    for k in range(1, n + 1):
        left_ok = (lm[k - 1] > s) and (k == 1 or lm[k - 2] < s)
        right_ok = (lp[k - 1] < s) and (k == n or lp[k] > s)
        if left_ok and right_ok:
            found = k
            break
    if found is None:
        raise NotLax(f"no Lax family: lam(u-)={lm}, lam(u+)={lp}, s={s}")
    return found


def lax_margin(system: HyperbolicSystem, u_minus, u_plus, s):
    """Smallest slack in the Lax inequality chains for the detected family."""
    k = lax_family(system, u_minus, u_plus, s)
    lm = char_speeds(system, u_minus)
    lp = char_speeds(system, u_plus)
    n = system.n
    margins = [lm[k - 1] - s, s - lp[k - 1]]
    if k > 1:
        margins.append(s - lm[k - 2])
    if k < n:
        margins.append(lp[k] - s)
    return float(min(margins))


def majda_liu_determinant(system: HyperbolicSystem, u_minus, u_plus, s):
    """det(r_1^-, ..., r_{k-1}^-, [u], r_{k+1}^+, ..., r_n^+).

    Nonzero iff the linearized shock-coupling system is uniquely solvable.
    """
    k = lax_family(system, u_minus, u_plus, s)
    n = system.n
    _, Pm, _ = eigen_decompose(system, u_minus)
    _, Pp, _ = eigen_decompose(system, u_plus)
    cols = []
    for i in range(1, k):
        cols.append(Pm[:, i - 1])
    cols.append(np.asarray(u_plus, dtype=float) - np.asarray(u_minus, dtype=float))
    for i in range(k + 1, n + 1):
        cols.append(Pp[:, i - 1])
    return float(np.linalg.det(np.stack(cols, axis=-1)))


# ---------------------------------------------------------------------------
# concrete systems


def burgers_system(c: float = 0.0) -> HyperbolicSystem:
    """Scalar Burgers flux with relaxation-type source g(u) = u - c."""

    def flux(u):
        return 0.5 * u * u

    def source(u):
        return u - c

    def flux_jacobian(u):
        return u[..., :, None].copy()

    def source_jacobian(u):
        return np.ones(u.shape[:-1] + (1, 1))

    def flux_hessian(u):
        return np.ones(u.shape[:-1] + (1, 1, 1))

    def source_hessian(u):
        return np.zeros(u.shape[:-1] + (1, 1, 1))

    return HyperbolicSystem(1, flux, source, flux_jacobian, source_jacobian,
                            flux_hessian, source_hessian, name=f"burgers(c={c:g})")


def saint_venant_system(g_cos: float = 1.0, g_sin: float = 0.1,
                        c_f: float = 0.004) -> HyperbolicSystem:
    """Inclined shallow water with turbulent friction, state (h, q).

    f = (q, g_cos h^2/2 + q^2/h),  g = (0, g_sin h - c_f q^2/h^2).
    """

    def flux(u):
        h, q = u[..., 0], u[..., 1]
        return np.stack([q, 0.5 * g_cos * h * h + q * q / h], axis=-1)

    def source(u):
        h, q = u[..., 0], u[..., 1]
        return np.stack([np.zeros_like(h), g_sin * h - c_f * q * q / (h * h)], axis=-1)

    def flux_jacobian(u):
        h, q = u[..., 0], u[..., 1]
        z = np.zeros_like(h)
        o = np.ones_like(h)
        row0 = np.stack([z, o], axis=-1)
        row1 = np.stack([g_cos * h - (q / h) ** 2, 2.0 * q / h], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def source_jacobian(u):
        h, q = u[..., 0], u[..., 1]
        z = np.zeros_like(h)
        row0 = np.stack([z, z], axis=-1)
        row1 = np.stack([g_sin + 2.0 * c_f * q * q / h ** 3,
                         -2.0 * c_f * q / (h * h)], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def flux_hessian(u):
        h, q = u[..., 0], u[..., 1]
        H = np.zeros(h.shape + (2, 2, 2))
        H[..., 1, 0, 0] = g_cos + 2.0 * q * q / h ** 3
        H[..., 1, 0, 1] = -2.0 * q / (h * h)
        H[..., 1, 1, 0] = -2.0 * q / (h * h)
        H[..., 1, 1, 1] = 2.0 / h
        return H

    def source_hessian(u):
        h, q = u[..., 0], u[..., 1]
        H = np.zeros(h.shape + (2, 2, 2))
        H[..., 1, 0, 0] = -6.0 * c_f * q * q / h ** 4
        H[..., 1, 0, 1] = 4.0 * c_f * q / h ** 3
        H[..., 1, 1, 0] = 4.0 * c_f * q / h ** 3
        H[..., 1, 1, 1] = -2.0 * c_f / (h * h)
        return H

    return HyperbolicSystem(2, flux, source, flux_jacobian, source_jacobian,
                            flux_hessian, source_hessian,
                            name=f"saint_venant(g_cos={g_cos:g},g_sin={g_sin:g},c_f={c_f:g})")
