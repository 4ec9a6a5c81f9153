"""Viscous shock layers: traveling-wave connections of the regularized system.

In the stretched layer variable the connection solves the once-integrated
equation  V' = f(V) - s V - (f(u-) - s u-),  approaching u- as xi -> -inf
and u+ as xi -> +inf.  The source term does not enter at this order; it is
picked up by the layer correctors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import make_interp_spline
from scipy.optimize import brentq

from .errors import ConfigError, FitFailed, NoConnection, NoDecay
from .systems import HyperbolicSystem, eigen_decompose


def _as_state(u, n: int) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (n,):
        raise ConfigError(f"state must have shape ({n},), got {u.shape}")
    return u


@dataclass(frozen=True)
class ShockProfile:
    """Sampled layer connection with analytic tails beyond the computed span.

    state/state_xi/state_xixi evaluate the connection and its first two
    derivatives; derivatives come from the layer ODE, not from spline
    differentiation, so they are exact given the sampled values.
    """

    system: HyperbolicSystem
    u_minus: np.ndarray
    u_plus: np.ndarray
    speed: float
    Xi: float                      # certified half-width of the layer window
    omega_minus: float             # linear approach rate toward u-
    omega_plus: float              # linear approach rate toward u+
    xi_lo: float                   # computed-trajectory span (phase-fixed frame)
    xi_hi: float
    _spline: object = field(repr=False)
    _tail_lo: np.ndarray = field(repr=False)   # V(xi_lo) - u-
    _tail_hi: np.ndarray = field(repr=False)   # V(xi_hi) - u+
    _flux_offset: np.ndarray = field(repr=False)  # f(u-) - s u-

    # -- evaluation ---------------------------------------------------------

    def state(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        scalar = xi.ndim == 0
        x = np.atleast_1d(xi)
        out = np.empty(x.shape + (self.system.n,))
        lo = x < self.xi_lo
        hi = x > self.xi_hi
        mid = ~(lo | hi)
        if mid.any():
            out[mid] = self._spline(x[mid])
        if lo.any():
            # linearized tail; relative error is O(distance) and the seam
            # distance is ~1e-6 of the jump, so this stays below 1e-10
            decay = np.exp(self.omega_minus * (x[lo] - self.xi_lo))
            out[lo] = self.u_minus + decay[:, None] * self._tail_lo
        if hi.any():
            decay = np.exp(-self.omega_plus * (x[hi] - self.xi_hi))
            out[hi] = self.u_plus + decay[:, None] * self._tail_hi
        if scalar:
            out = out[0]
        if self.system.n == 1:
            return out[..., 0]
        return out

    def _vec(self, xi) -> np.ndarray:
        v = self.state(xi)
        if self.system.n == 1:
            return np.asarray(v)[..., None]
        return v

    def rhs(self, v) -> np.ndarray:
        """Layer ODE right-hand side  f(v) - s v - (f(u-) - s u-)."""
        v = np.asarray(v, dtype=float)
        return self.system.flux(v) - self.speed * v - self._flux_offset

    def state_xi(self, xi) -> np.ndarray:
        out = self.rhs(self._vec(xi))
        if self.system.n == 1:
            return out[..., 0]
        return out

    def state_xixi(self, xi) -> np.ndarray:
        v = self._vec(xi)
        r = self.rhs(v)
        jac = self.system.flux_jacobian(v) - self.speed * np.eye(self.system.n)
        out = np.einsum('...ij,...j->...i', jac, r)
        if self.system.n == 1:
            return out[..., 0]
        return out

    def state_xi3(self, xi) -> np.ndarray:
        v = self._vec(xi)
        r = self.rhs(v)
        jac = self.system.flux_jacobian(v) - self.speed * np.eye(self.system.n)
        r2 = np.einsum('...ij,...j->...i', jac, r)
        hess = self.system.flux_hess(v)
        out = (np.einsum('...ijk,...j,...k->...i', hess, r, r)
               + np.einsum('...ij,...j->...i', jac, r2))
        if self.system.n == 1:
            return out[..., 0]
        return out

    def samples(self, num: int = 2001) -> tuple[np.ndarray, np.ndarray]:
        xs = np.linspace(-self.Xi, self.Xi, num)
        return xs, self.state(xs)


def _unstable_direction(system: HyperbolicSystem, u_minus: np.ndarray,
                        speed: float) -> tuple[np.ndarray, float]:
    lam, P, _ = eigen_decompose(system, u_minus)
    rates = lam - speed
    pos = np.where(rates > 0)[0]
    if pos.size == 0:
        raise NoConnection("left state has no unstable direction; no layer "
                           "orbit can leave it")
    if pos.size > 1:
        raise ConfigError("layer shooting implemented for a one-dimensional "
                          f"unstable manifold, found {pos.size} growing modes")
    i = int(pos[0])
    return P[:, i] / np.linalg.norm(P[:, i]), float(rates[i])


def solve_profile(system: HyperbolicSystem, u_minus, u_plus, speed: float,
                  *, offset_scale: float = 1e-6, ball_tol: float = 1e-8,
                  resample: int = 4001) -> ShockProfile:
    """Shoot along the unstable manifold of u- and land on u+.

    Raises NoConnection when the orbit fails to reach u+ (equal states,
    wrong-direction data, or states that are not equilibria of the layer
    ODE).
    """
    n = system.n
    um = _as_state(u_minus, n)
    up = _as_state(u_plus, n)
    s = float(speed)
    jump = np.linalg.norm(up - um)
    scale = max(1.0, np.linalg.norm(um), np.linalg.norm(up))
    if jump <= 1e-12 * scale:
        raise NoConnection("equal end states carry no layer")

    offset_flux = system.flux(um) - s * um
    if np.linalg.norm(system.flux(up) - s * up - offset_flux) > 1e-8 * scale:
        raise NoConnection("end states do not satisfy the jump condition; "
                           "u+ is not an equilibrium of the layer ODE")

    def ode(_, v):
        return system.flux(v) - s * v - offset_flux

    direction, rate_minus = _unstable_direction(system, um, s)
    lam_p, _, _ = eigen_decompose(system, up)
    rates_p = lam_p - s
    if np.max(rates_p) >= 0:
        raise NoConnection("right state is not attracting for the layer flow")
    rate_plus = float(-np.max(rates_p))   # slowest contraction governs the tail

    omega_est = min(rate_minus, rate_plus)
    Xi = max(40.0, 32.0 / omega_est)
    span_max = 10.0 * Xi
    ball = ball_tol * max(1.0, jump)

    def attempt(sign: float):
        v0 = um + sign * offset_scale * jump * direction

        def hit(_, v):
            return np.linalg.norm(v - up) - ball
        hit.terminal = True
        hit.direction = -1

        def escaped(_, v):
            return np.linalg.norm(v) - 1e3 * scale
        escaped.terminal = True
        escaped.direction = 1

        # max_step keeps the dense-output interpolant accurate across the
        # nearly flat tail stretches, where error steps would grow huge
        sol = solve_ivp(ode, (0.0, span_max), v0, method='DOP853',
                        rtol=1e-12, atol=1e-12, dense_output=True,
                        max_step=0.5 / omega_est, events=(hit, escaped))
        ok = sol.status == 1 and len(sol.t_events[0]) > 0
        return sol, ok

    # leave u- on the side of its unstable direction that points at u+
    first = np.dot(direction, up - um)
    first = 1.0 if abs(first) < 1e-14 else np.sign(first)
    sol, ok = attempt(first)
    if not ok:
        sol, ok = attempt(-first)
    if not ok:
        raise NoConnection("layer orbit from the unstable manifold of u- "
                           f"did not reach u+ within span {span_max:g}")

    xi_end = float(sol.t_events[0][0])

    # phase fix: the component with the largest jump crosses its midpoint at 0
    jmax = int(np.argmax(np.abs(up - um)))
    mid = 0.5 * (um[jmax] + up[jmax])
    ts = np.linspace(0.0, xi_end, 4001)
    comp = sol.sol(ts)[jmax] - mid
    sgn = np.sign(up[jmax] - um[jmax])
    crossings = np.where((comp[:-1] * comp[1:] <= 0)
                         & (sgn * (comp[1:] - comp[:-1]) >= 0))[0]
    if crossings.size == 0:
        raise NoConnection("no midpoint crossing along the computed orbit")
    i0 = int(crossings[0])
    xi_star = brentq(lambda t: float(sol.sol(t)[jmax] - mid),
                     ts[i0], ts[i0 + 1], xtol=1e-13)

    xi_lo = -xi_star
    xi_hi = xi_end - xi_star
    xs = np.linspace(xi_lo, xi_hi, resample)
    vals = sol.sol(xs + xi_star).T
    spline = make_interp_spline(xs, vals, k=5, axis=0)

    prof = ShockProfile(
        system=system, u_minus=um, u_plus=up, speed=s, Xi=Xi,
        omega_minus=rate_minus, omega_plus=rate_plus,
        xi_lo=xi_lo, xi_hi=xi_hi, _spline=spline,
        _tail_lo=vals[0] - um, _tail_hi=vals[-1] - up,
        _flux_offset=offset_flux)

    for side_xi, target in ((-Xi, um), (Xi, up)):
        gap = np.linalg.norm(np.atleast_1d(prof.state(side_xi)) - target)
        if gap > 1e-10 * max(1.0, jump):
            raise NoConnection(f"layer endpoint at xi={side_xi:g} off by "
                               f"{gap:.3e}")
    return prof


def profile_residual(profile, num: int = 2001) -> float:
    """Sup of |d/dxi V - rhs(V)| with the derivative taken independently.

    The derivative comes from a quintic fit to fresh samples of the stored
    connection, so a corrupted profile (wrong values, added bump) shows up
    even though state_xi is analytic by construction.
    """
    xs = np.linspace(-profile.Xi, profile.Xi, num)
    vals = np.asarray(profile.state(xs), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    spl = make_interp_spline(xs, vals, k=5, axis=0)
    deriv = spl.derivative()(xs)
    rhs = np.asarray(profile.rhs(vals))
    return float(np.max(np.abs(deriv - rhs)))


def decay_rate(profile, side, *, window=(1e-7, 1e-2)) -> float:
    """Exponential approach rate toward the chosen end state, by log-linear fit.

    Fits ln|V - u_end| on the portion of the tail where the distance lies
    inside `window` (relative to the jump size).  FitFailed when the fit is
    poor or underdetermined, NoDecay when the tail does not actually decay.
    """
    side_p = str(side) in ('+', 'plus', '1') or side == 1
    u_end = np.atleast_1d(profile.u_plus if side_p else profile.u_minus)
    jump = np.linalg.norm(np.atleast_1d(profile.u_plus)
                          - np.atleast_1d(profile.u_minus))
    xs = np.linspace(0.0, profile.Xi, 4001)
    if not side_p:
        xs = -xs
    vals = np.asarray(profile.state(xs), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    dist = np.linalg.norm(vals - u_end[None, :], axis=1)

    lo, hi = window[0] * jump, window[1] * jump
    mask = (dist > lo) & (dist < hi)
    if mask.sum() < 8:
        mask = (dist > 1e-9 * jump) & (dist < 5e-2 * jump)
    if mask.sum() < 8:
        raise FitFailed("too few tail samples inside the fitting window")

    x_fit = xs[mask]
    y_fit = np.log(dist[mask])
    order = np.argsort(np.abs(x_fit))
    if y_fit[order][-1] >= y_fit[order][0]:
        raise NoDecay("distance to the end state does not decrease along "
                      "the tail")
    slope, intercept = np.polyfit(x_fit, y_fit, 1)
    resid = y_fit - (slope * x_fit + intercept)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    if rms > 0.1:
        raise FitFailed(f"log-linear tail fit rms {rms:.3f} exceeds 0.1")
    rate = float(-slope) if side_p else float(slope)
    if rate <= 0:
        raise NoDecay("fitted tail rate is not positive")
    return rate
