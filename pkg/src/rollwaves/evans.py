"""Evans-function certification that the shock layers are spectrally stable.

The linearized layer problem lambda w + ((df(V) - s) w)_xi = w_xixi has
essential spectrum touching the origin, a translational zero eigenvalue
V_xi, and (for a stable layer) nothing else in the closed right
half-plane.  This module shoots the unstable solution bundle from the
left tail and the stable one from the right tail, pairs them into an
analytic Evans determinant D(lambda), and counts zeros by winding D over
the boundary of a punctured right-half-disk.

Conventions: in the flux variables (w, w_xi - (df(V) - s) w) the
coefficient matrix is [[df(V) - s, I], [lambda I, 0]]; endpoint bases are
explicit in the characteristic modes, with the principal square root of
a_i^2 + 4 lambda fixing one analytic branch over the whole sampled
region, and each bundle carries the gauge e^(-(sum mu) xi) that removes
the dominant endpoint growth.  Winding numbers and zero locations do not
depend on these choices; the magnitude reported for D'(0) does.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (ConfigError, DegenerateZero, IntegrationOverflow,
                     SplittingFailure, UnstableSpectrum)
from .profile import ShockProfile, solve_profile
from .systems import eigen_decompose, majda_liu_determinant

__all__ = [
    "FirstOrderSystem", "first_order_system", "evans_D", "EvansEvaluation",
    "winding_check", "evans_check_rollwave", "write_evans_csv",
]

_TAIL_TARGET = 1e-10
_RENORM_BAND = (1e-6, 1e6)
_LOG_LIMIT = 690.0


def _state_vec(profile: ShockProfile, xi):
    v = np.asarray(profile.state(xi), dtype=float)
    if profile.system.n == 1:
        return v[..., None]
    return v


def _mode_roots(a, lam):
    """Roots of mu^2 - a mu - lam = 0, principal branch: (stable, unstable).

    For Re lam > 0 the principal square root has real part above |a|, so
    the labels are exact there; elsewhere they are the analytic
    continuations, valid while a^2 + 4 lam stays off the negative real axis.
    """
    s = np.sqrt(a * a + 4.0 * np.asarray(lam, dtype=complex))
    return 0.5 * (a - s), 0.5 * (a + s)


class FirstOrderSystem:
    """First-order form of the layer eigenvalue problem.

    Since ((df(V) - s) w)_xi differentiates the product, the substitution
    v = w_xi - (df(V) - s) w leaves v_xi = lambda w with no derivative of
    the coefficient, so the interior matrix needs the profile state only:

        M(xi) = [[df(V(xi)) - s, I], [lambda I, 0]].

    The endpoint limits decouple into the characteristic modes, each
    contributing the quadratic mu^2 - a_i mu - lambda = 0 with
    a_i = lambda_i(u_pm) - s.
    """

    def __init__(self, profile: ShockProfile, lam: complex):
        self.profile = profile
        self.lam = complex(lam)
        self.n = profile.system.n
        self.ends = {}
        for side, u in (("-", profile.u_minus), ("+", profile.u_plus)):
            lams, P, _ = eigen_decompose(profile.system,
                                         np.asarray(u, dtype=float))
            self.ends[side] = (lams - profile.speed, P)

    def coefficient(self, xi):
        n = self.n
        v = _state_vec(self.profile, xi)
        A = self.profile.system.flux_jacobian(v) \
            - self.profile.speed * np.eye(n)
        M = np.zeros(np.shape(xi) + (2 * n, 2 * n), dtype=complex)
        M[..., :n, :n] = A
        M[..., :n, n:] = np.eye(n)
        M[..., n:, :n] = self.lam * np.eye(n)
        return M

    __call__ = coefficient

    def limit(self, side):
        n = self.n
        a, P = self.ends[side]
        M = np.zeros((2 * n, 2 * n), dtype=complex)
        M[:n, :n] = P @ np.diag(a) @ np.linalg.inv(P)
        M[:n, n:] = np.eye(n)
        M[n:, :n] = self.lam * np.eye(n)
        return M

    def endpoint_mu(self, side):
        a, _ = self.ends[side]
        return np.array([m for ai in a for m in _mode_roots(ai, self.lam)])

    def check_splitting(self):
        """Exactly n decaying modes at +inf and n growing at -inf."""
        n_stab = int(np.sum(self.endpoint_mu("+").real < 0))
        n_unst = int(np.sum(self.endpoint_mu("-").real > 0))
        if (n_stab, n_unst) != (self.n, self.n):
            raise SplittingFailure(
                f"consistent splitting fails at lambda={self.lam:g}: "
                f"{n_stab} decaying at +inf, {n_unst} growing at -inf "
                f"(need {self.n} each); lambda touches the essential "
                "spectrum")
        return n_stab, n_unst


def first_order_system(profile: ShockProfile, lam) -> FirstOrderSystem:
    return FirstOrderSystem(profile, lam)


# ---------------------------------------------------------------------------
# endpoint data shared by every shooting route

def _endpoint_rates(profile: ShockProfile):
    out = []
    for u in (profile.u_minus, profile.u_plus):
        lams, _, _ = eigen_decompose(profile.system,
                                     np.asarray(u, dtype=float))
        out.extend(lams - profile.speed)
    return np.asarray(out)


def _branch_distance(profile: ShockProfile) -> float:
    """Distance from the origin to the nearest branch point -a_i^2/4.

    The mode formulas continue D analytically into |lambda| below this;
    the Cauchy circle for D'(0) must stay well inside it.
    """
    a = _endpoint_rates(profile)
    return float((a ** 2).min() / 4.0)


def _integration_spans(profile: ShockProfile, tail_tol: float):
    um = np.asarray(profile.u_minus, dtype=float)
    up = np.asarray(profile.u_plus, dtype=float)
    tl = np.abs(_state_vec(profile, profile.xi_lo) - um).max()
    th = np.abs(_state_vec(profile, profile.xi_hi) - up).max()
    lo = profile.xi_lo
    if tl > tail_tol:
        lo -= np.log(tl / tail_tol) / profile.omega_minus
    hi = profile.xi_hi
    if th > tail_tol:
        hi += np.log(th / tail_tol) / profile.omega_plus
    return float(lo), float(hi)


def _guard_left_halfplane(profile: ShockProfile, lams):
    bd = _branch_distance(profile)
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    bad = (lams.real < 0) & (np.abs(lams) >= 0.9 * bd)
    if np.any(bad):
        raise ConfigError(
            f"lambda {lams[bad][0]:g} lies left of the imaginary axis "
            f"beyond the analytic continuation radius {0.9 * bd:.3g}")


# ---------------------------------------------------------------------------
# batched bundle propagation (all lambdas share one stacked solve)

def _batch_modes(fos_ends, n, side, which, lams):
    """Per-lambda initial data: mode vectors stacked over the batch.

    Returns (rho, vecs) with rho the gauge rates (sum of initializing
    mus, shape K) and vecs a list of n arrays of shape (K, 2n).
    """
    a, P = fos_ends[side]
    K = len(lams)
    rho = np.zeros(K, dtype=complex)
    vecs = []
    for i, ai in enumerate(a):
        mu_s, mu_u = _mode_roots(ai, lams)
        mu = mu_s if which == "stable" else mu_u
        rho += mu
        r = P[:, i]
        v = np.zeros((K, 2 * n), dtype=complex)
        v[:, :n] = r
        v[:, n:] = (mu - ai)[:, None] * r
        vecs.append(v)
    return rho, vecs


def _propagate_batch(profile, lams, xi_from, rho, y0, rank, rtol, atol):
    """Carry stacked bundle data from xi_from to 0 in the analytic gauge.

    rank 1: y0 has shape (K, 2n), evolved by y' = (M - rho) y.
    rank 2: y0 has shape (K, 2n, 2n) antisymmetric, evolved by
            Y' = M Y + Y M^T - rho Y (the exterior-square flow).
    Magnitude renormalizations are tracked per lambda in log space and
    folded back at the end, so analyticity in lambda is untouched.
    """
    n = profile.system.n
    speed = profile.speed
    sysm = profile.system
    K = len(lams)
    shape = y0.shape

    def coeff(xi):
        v = _state_vec(profile, float(xi))
        return sysm.flux_jacobian(v) - speed * np.eye(n)

    if rank == 1:
        def rhs(xi, flat):
            y = flat.reshape(K, 2 * n)
            A = coeff(xi)
            dy = np.empty_like(y)
            dy[:, :n] = y[:, :n] @ A.T + y[:, n:] - rho[:, None] * y[:, :n]
            dy[:, n:] = lams[:, None] * y[:, :n] - rho[:, None] * y[:, n:]
            return dy.reshape(-1)
    else:
        def rhs(xi, flat):
            Y = flat.reshape(K, 2 * n, 2 * n)
            A = coeff(xi)
            M0 = np.zeros((2 * n, 2 * n), dtype=complex)
            M0[:n, :n] = A
            M0[:n, n:] = np.eye(n)
            T = np.einsum('ij,kjl->kil', M0, Y) \
                + np.einsum('kij,lj->kil', Y, M0)
            T[:, n:, :] += lams[:, None, None] * Y[:, :n, :]
            T[:, :, n:] += lams[:, None, None] * Y[:, :, :n]
            T -= rho[:, None, None] * Y
            return T.reshape(-1)

    y = y0.astype(complex).reshape(K, -1)
    logs = np.zeros(K)
    chunks = np.linspace(xi_from, 0.0, 7)
    for a_, b_ in zip(chunks[:-1], chunks[1:]):
        sol = solve_ivp(rhs, (a_, b_), y.reshape(-1), method="DOP853",
                        rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationOverflow(
                f"bundle integration failed on [{a_:g}, {b_:g}]: "
                f"{sol.message}")
        y = sol.y[:, -1].reshape(K, -1)
        mag = np.abs(y).max(axis=1)
        if not np.all(np.isfinite(mag)) or np.any(mag == 0.0):
            raise IntegrationOverflow(
                f"bundle magnitude degenerate at xi={b_:g}")
        fix = (mag < _RENORM_BAND[0]) | (mag > _RENORM_BAND[1])
        if np.any(fix):
            y[fix] /= mag[fix, None]
            logs[fix] += np.log(mag[fix])
    return y.reshape(shape), logs


def _pair_bundles(Ym, Yp, n):
    if n == 1:
        return Ym[:, 0] * Yp[:, 1] - Ym[:, 1] * Yp[:, 0]
    return (Ym[:, 0, 1] * Yp[:, 2, 3] - Ym[:, 0, 2] * Yp[:, 1, 3]
            + Ym[:, 0, 3] * Yp[:, 1, 2] + Ym[:, 1, 2] * Yp[:, 0, 3]
            - Ym[:, 1, 3] * Yp[:, 0, 2] + Ym[:, 2, 3] * Yp[:, 0, 1])


def _evans_batch(profile: ShockProfile, lams, *, tail_tol=_TAIL_TARGET,
                 rtol=1e-9, atol=1e-12, init_scale=(1.0, 1.0)):
    """D at many lambdas through one stacked integration per side."""
    lams = np.asarray(lams, dtype=complex).ravel()
    _guard_left_halfplane(profile, lams)
    n = profile.system.n
    if n > 2:
        raise ConfigError("bundle shooting implemented for n <= 2")
    cm, cp = complex(init_scale[0]), complex(init_scale[1])
    if cm == 0 or cp == 0:
        raise ConfigError("initial bundle scales must be nonzero")
    fos = FirstOrderSystem(profile, lams[0])
    lo, hi = _integration_spans(profile, tail_tol)
    rho_m, vecs_m = _batch_modes(fos.ends, n, "-", "unstable", lams)
    rho_p, vecs_p = _batch_modes(fos.ends, n, "+", "stable", lams)
    if n == 1:
        y0_m = cm * vecs_m[0]
        y0_p = cp * vecs_p[0]
        rank = 1
    else:
        y0_m = cm * (np.einsum('ki,kj->kij', vecs_m[0], vecs_m[1])
                     - np.einsum('ki,kj->kij', vecs_m[1], vecs_m[0]))
        y0_p = cp * (np.einsum('ki,kj->kij', vecs_p[0], vecs_p[1])
                     - np.einsum('ki,kj->kij', vecs_p[1], vecs_p[0]))
        rank = 2
    Ym, log_m = _propagate_batch(profile, lams, lo, rho_m, y0_m, rank,
                                 rtol, atol)
    Yp, log_p = _propagate_batch(profile, lams, hi, rho_p, y0_p, rank,
                                 rtol, atol)
    raw = _pair_bundles(Ym.reshape(len(lams), -1) if rank == 1 else Ym,
                        Yp.reshape(len(lams), -1) if rank == 1 else Yp, n)
    total = log_m + log_p
    nz = raw != 0
    total = np.where(nz, total + np.log(np.abs(np.where(nz, raw, 1.0))),
                     -np.inf)
    phase = np.where(nz, raw / np.abs(np.where(nz, raw, 1.0)), 0.0)
    if np.any(total > _LOG_LIMIT):
        raise IntegrationOverflow(
            "Evans value exceeds floating-point range "
            f"(log {total.max():.1f})")
    return phase * np.exp(np.where(np.isfinite(total), total, 0.0)) \
        * np.where(nz, 1.0, 0.0)


def evans_D(profile: ShockProfile, lam, *, tail_tol: float = _TAIL_TARGET,
            rtol: float = 1e-10, atol: float = 1e-12,
            init_scale=(1.0, 1.0)) -> complex:
    """Evans determinant of the layer at one spectral parameter.

    Pairs the unstable bundle carried from the left tail against the
    stable bundle carried from the right tail, both in the fixed analytic
    gauge; the zero set and winding are normalization-independent, the
    overall scale is fixed by that gauge.  `init_scale` multiplies the two
    initial bundles; any nonzero choice rescales D without moving zeros.
    """
    return complex(_evans_batch(profile, [lam], tail_tol=tail_tol,
                                rtol=rtol, atol=atol,
                                init_scale=init_scale)[0])


def _shoot_determinant(profile: ShockProfile, lam, *,
                       tail_tol: float = _TAIL_TARGET,
                       rtol: float = 1e-10, atol: float = 1e-12) -> complex:
    """Independent scalar route in the raw variables (w, w_xi).

    Integrates lambda w + (a w)_xi = w_xixi with the coefficient
    derivative written out through the flux curvature, so this route
    exercises the product rule the flux variables eliminate.  The change
    of variables between the routes has unit determinant and maps one
    initialization onto the other, hence the two determinants agree to
    integrator tolerance.
    """
    if profile.system.n != 1:
        raise ConfigError("direct shooting check is scalar-only")
    lam = complex(lam)
    _guard_left_halfplane(profile, lam)
    fos = FirstOrderSystem(profile, lam)
    lo, hi = _integration_spans(profile, tail_tol)
    sysm = profile.system

    def run(xi_from, a_end):
        _, mu_u = _mode_roots(a_end, lam)
        mu_s, _ = _mode_roots(a_end, lam)
        mu = mu_u if xi_from < 0 else mu_s

        def rhs(xi, y):
            v = _state_vec(profile, float(xi))
            a = complex(sysm.flux_jacobian(v)[0, 0] - profile.speed)
            ap = complex(sysm.flux_hess(v)[0, 0, 0]
                         * profile.state_xi(float(xi)))
            w, wp = y
            return np.array([wp - mu * w,
                             lam * w + ap * w + a * wp - mu * wp])

        sol = solve_ivp(rhs, (xi_from, 0.0), np.array([1.0 + 0j, mu]),
                        method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationOverflow(sol.message)
        return sol.y[:, -1]

    (a_m,), _ = fos.ends["-"]
    (a_p,), _ = fos.ends["+"]
    wm = run(lo, a_m)
    wp = run(hi, a_p)
    return complex(wm[0] * wp[1] - wm[1] * wp[0])


# ---------------------------------------------------------------------------
# winding over the punctured right-half contour

@dataclass
class EvansEvaluation:
    """One winding certification and its nondegeneracy data."""
    profile: ShockProfile
    R: float
    r0: float
    contour: np.ndarray = field(repr=False)      # sampled lambda values
    values: np.ndarray = field(repr=False)       # D at those samples
    winding: int = 0
    Dprime0: complex = 0j


def _contour_pieces(R: float, r0: float):
    # region-counterclockwise; the axis segments are geometric in |lambda|
    # so the decades between r0 and R get even phase coverage
    return [
        lambda s: R * np.exp(1j * np.pi * (s - 0.5)),       # arc through +R
        lambda s: 1j * R * (r0 / R) ** s,                   # +iR to +ir0
        lambda s: r0 * np.exp(1j * np.pi * (0.5 - s)),      # around origin
        lambda s: -1j * r0 * (R / r0) ** s,                 # -ir0 to -iR
    ]


def winding_check(profile: ShockProfile, R=None, r0: float = 0.05, *,
                  samples: int = 256, refine_limit: int = 2048,
                  dprime_samples: int = 64, rtol: float = 1e-9,
                  init_scale=(1.0, 1.0)) -> EvansEvaluation:
    """Count Evans zeros in {Re > 0, |lambda| <= R} minus the r0-disk.

    The winding of D around the region boundary equals the zero count and
    must vanish (UnstableSpectrum otherwise); D'(0), from a Cauchy
    integral on |lambda| = r0, must clear 1e-6 (DegenerateZero
    otherwise).  R defaults to five times the square of the largest
    endpoint rate; r0 shrinks automatically to stay well inside the
    branch-point radius; adjacent samples with phase step above 0.8 pi
    trigger refinement.
    """
    rates = _endpoint_rates(profile)
    if R is None:
        R = 5.0 * float(np.abs(rates).max()) ** 2
    R = float(R)
    bd = _branch_distance(profile)
    r0 = min(float(r0), 0.4 * bd)
    if not 0 < r0 < R:
        raise ConfigError(f"need 0 < r0 < R, got r0={r0:g}, R={R:g}")

    def batch(ls):
        return _evans_batch(profile, ls, rtol=rtol, init_scale=init_scale)

    pieces = _contour_pieces(R, r0)
    counts = [max(samples // 2, 8), max(samples // 8, 4),
              max(samples // 4, 8), max(samples // 8, 4)]
    params = [list(np.linspace(0.0, 1.0, c)) for c in counts]
    flat = np.concatenate([[pc(s) for s in ss]
                           for pc, ss in zip(pieces, params)])
    vals_flat = batch(flat)
    values = []
    pos = 0
    for c in counts:
        values.append(list(vals_flat[pos:pos + c]))
        pos += c

    total = sum(counts)
    while True:
        new_pts = []          # (piece, index, s)
        for k in range(4):
            ss, vv = params[k], values[k]
            for j in range(len(ss) - 1):
                if abs(np.angle(vv[j + 1] / vv[j])) > 0.8 * np.pi:
                    new_pts.append((k, j, 0.5 * (ss[j] + ss[j + 1])))
        if not new_pts:
            break
        if total + len(new_pts) > refine_limit:
            raise ConfigError(
                "contour refinement exhausted; the phase of D varies too "
                "fast (zero near the contour?)")
        new_vals = batch([pieces[k](s) for k, _, s in new_pts])
        for off, (k, j, s) in enumerate(sorted(new_pts,
                                               key=lambda t: (t[0], -t[1]))):
            idx = new_pts.index((k, j, s))
            params[k].insert(j + 1, s)
            values[k].insert(j + 1, new_vals[idx])
        total += len(new_pts)

    lams = np.concatenate([[pc(s) for s in ss]
                           for pc, ss in zip(pieces, params)])
    vals = np.concatenate([np.asarray(v) for v in values])
    mags = np.abs(vals)
    if mags.min() < 1e-10 * mags.max():
        raise ConfigError("contour passes too close to an Evans zero; "
                          "adjust R or r0")
    closed = np.r_[vals, vals[:1]]
    phase_sum = float(np.sum(np.angle(closed[1:] / closed[:-1])))
    winding = int(np.round(phase_sum / (2.0 * np.pi)))
    if abs(phase_sum - 2.0 * np.pi * winding) > 0.5:
        raise ConfigError(
            f"phase sum {phase_sum:.3f} is far from every multiple of "
            "2 pi; contour under-resolved")

    # Cauchy derivative on the small circle; the r0 shrink above keeps the
    # whole disk inside the region where the mode formulas stay analytic
    m = np.arange(dprime_samples)
    circ = r0 * np.exp(2j * np.pi * m / dprime_samples)
    dvals = _evans_batch(profile, circ, rtol=min(rtol, 1e-10),
                         init_scale=init_scale)
    dprime0 = complex(np.mean(dvals / circ))

    result = EvansEvaluation(profile=profile, R=R, r0=float(r0),
                             contour=lams, values=vals, winding=winding,
                             Dprime0=dprime0)
    if winding != 0:
        raise UnstableSpectrum(
            f"Evans winding {winding} != 0 on R={R:g}, r0={r0:g}: "
            "spectrum in the closed right half-plane")
    if abs(dprime0) <= 1e-6:
        raise DegenerateZero(
            f"|D'(0)| = {abs(dprime0):.3g} <= 1e-6: translational zero "
            "not simple at this resolution")
    return result


# ---------------------------------------------------------------------------
# roll-wave certification runs

def evans_check_rollwave(rollwave, tau_samples: int = 5, *, R=None,
                         r0: float = 0.05, samples: int = 256,
                         rtol: float = 1e-9):
    """Winding certification of every shock layer at sampled times.

    The layers of a rigid wave are time-independent, so the time sweep is
    a consistency run, not a parameter scan; each row re-derives the
    traces and re-solves the connection from scratch.  The inviscid
    shock-coupling determinant rides along for comparison; its agreement
    with the Evans verdict is reported, never asserted.
    """
    if tau_samples < 1:
        raise ConfigError("need at least one time sample")
    taus = np.linspace(0.0, rollwave.T_star, tau_samples)
    rows = []
    for tau in taus:
        for j in range(1, rollwave.m + 1):
            um = np.atleast_1d(rollwave.trace(j, "-", 0, tau))
            up = np.atleast_1d(rollwave.trace(j, "+", 0, tau))
            prof = solve_profile(rollwave.system, um, up, rollwave.speed)
            ev = winding_check(prof, R=R, r0=r0, samples=samples, rtol=rtol)
            ml = majda_liu_determinant(rollwave.system, um, up,
                                       rollwave.speed)
            rows.append({
                "tau": float(tau), "j": j, "winding": ev.winding,
                "abs_Dprime0": abs(ev.Dprime0), "R": ev.R, "r0": ev.r0,
                "majda_liu": float(ml),
                "evans_majda_liu_consistent": bool(
                    ev.winding == 0 and abs(ml) > 0),
            })
    return {"system": rollwave.system.name or "unnamed",
            "tau_samples": tau_samples, "rows": rows}


def write_evans_csv(path, report):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "j", "winding", "abs_Dprime0"])
        for row in report["rows"]:
            w.writerow([f"{row['tau']:.17g}", row["j"], row["winding"],
                        f"{row['abs_Dprime0']:.17g}"])
