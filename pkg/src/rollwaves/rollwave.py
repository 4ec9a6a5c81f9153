"""Periodic roll-wave base solutions.

Both constructions here are rigid traveling waves: m shocks per period all
moving at a common speed s, with time-independent one-sided traces.  The
frame coordinate z measures distance from the first shock, so the smooth
profile lives on (0, L) with the jump at z = 0 (mod L).
"""

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import NoRollWave
from .systems import (HyperbolicSystem, burgers_system, saint_venant_system,
                      lax_family, lax_margin, rankine_hugoniot_residual)

_GL5_NODES, _GL5_WEIGHTS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True)
class RollWave:
    """Periodic entropy solution made of smooth arcs joined by Lax shocks.

    frame_state(z) evaluates the smooth profile for z in (0, L) measured
    from the shock; frame_dstate / frame_d2state are its exact first and
    second derivatives.  trace(j, side, k, t) returns d^k/dx^k u at the
    shock from the given side.
    """
    system: HyperbolicSystem
    L: float
    m: int
    T_star: float
    r: float
    speed: float
    x0: float
    frame_state: Callable
    frame_dstate: Callable
    frame_d2state: Callable
    lax_index: int
    name: str = ""

    @property
    def stationary(self) -> bool:
        return self.speed == 0.0

    def shock_position(self, j: int, t):
        return self.x0 + (j - 1) * self.L / self.m + self.speed * np.asarray(t, dtype=float)

    def shock_speed(self, j: int, t):
        t = np.asarray(t, dtype=float)
        return np.full(t.shape, self.speed) if t.shape else float(self.speed)

    def _frame_z(self, x, t):
        z = (np.asarray(x, dtype=float) - self.x0 - self.speed * np.asarray(t, dtype=float)) % self.L
        return z

    def field(self, x, t):
        return self.frame_state(self._frame_z(x, t))

    def field_x(self, x, t):
        return self.frame_dstate(self._frame_z(x, t))

    def field_t(self, x, t):
        # rigid traveling wave: d/dt = -s d/dx between shocks
        return -self.speed * self.field_x(x, t)

    def trace(self, j: int, side, k: int, t=0.0):
        """One-sided derivative d^k/dx^k u^{j +/-}(t); k in {0, 1, 2}."""
        sgn = _side_sign(side)
        if k == 0:
            fn = self.frame_state
        elif k == 1:
            fn = self.frame_dstate
        elif k == 2:
            fn = self.frame_d2state
        else:
            raise ValueError("trace order k must be 0, 1 or 2")
        z = 0.0 if sgn > 0 else self.L
        val = fn(np.asarray(z))
        shape = np.shape(t)
        if shape:
            return np.broadcast_to(val, shape + (self.system.n,)).copy()
        return val

    def cell_averages(self, N: int, t=0.0):
        """Exact cell averages of u(., t) on the uniform N-cell grid of [0, L)."""
        dx = self.L / N
        edges = np.arange(N) * dx
        za = (edges - self.x0 - self.speed * t) % self.L
        zb = za + dx
        # each cell holds at most one periodic image of the jump
        wrap = zb > self.L
        out = np.zeros((N, self.system.n))
        out += _gl5_piece(self.frame_state, za, np.where(wrap, self.L, zb))
        if np.any(wrap):
            out[wrap] += _gl5_piece(self.frame_state, np.zeros(wrap.sum()),
                                    zb[wrap] - self.L)
        return out / dx

    def export_csv(self, path, N: int = 512, times=(0.0,)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "t"] + [f"u_{i+1}" for i in range(self.system.n)])
            x = (np.arange(N) + 0.5) * self.L / N
            for t in times:
                u = self.field(x, t)
                for i in range(N):
                    w.writerow([f"{x[i]:.17g}", f"{t:.17g}"]
                               + [f"{u[i, c]:.17g}" for c in range(self.system.n)])

    def export_meta_json(self, path):
        meta = {
            "L": self.L,
            "m": self.m,
            "T_star": self.T_star,
            "shock_positions_t0": [float(self.shock_position(j + 1, 0.0))
                                   for j in range(self.m)],
        }
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _side_sign(side):
    if side in (1, "+", "plus"):
        return 1
    if side in (-1, "-", "minus"):
        return -1
    raise ValueError(f"side must be '+' or '-', got {side!r}")


def _gl5_piece(fn, a, b):
    a = np.atleast_1d(a)
    b = np.atleast_1d(b)
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    acc = 0.0
    for xi, wi in zip(_GL5_NODES, _GL5_WEIGHTS):
        acc = acc + wi * fn(mid + half * xi) * half[:, None]
    return acc


# ---------------------------------------------------------------------------
# sawtooth Burgers roll-wave


def build_sawtooth_rollwave(L: float = 2.0, c: float = 0.0,
                            T_star: float = 0.5) -> RollWave:
    """Exact m=1 roll-wave of Burgers flux with source g(u) = u - c.

    u(x, t) = c + ((x - ct) mod L) - L/2; the linear ramp solves the balance
    law exactly between shocks and the jump (u^- = c + L/2, u^+ = c - L/2)
    is a stationary-in-frame Lax 1-shock of speed c.
    """
    if L <= 0:
        raise NoRollWave("period must be positive")
    system = burgers_system(c)

    def frame_state(z):
        z = np.asarray(z, dtype=float)
        return (c + z - L / 2.0)[..., None]

    def frame_dstate(z):
        z = np.asarray(z, dtype=float)
        return np.ones(z.shape + (1,))

    def frame_d2state(z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape + (1,))

    return RollWave(system=system, L=L, m=1, T_star=T_star, r=L / 4.0,
                    speed=c, x0=0.0, frame_state=frame_state,
                    frame_dstate=frame_dstate, frame_d2state=frame_d2state,
                    lax_index=1, name=f"sawtooth(L={L:g},c={c:g})")


# ---------------------------------------------------------------------------
# Dressler roll-wave of the Saint-Venant system


def build_dressler_rollwave(g_cos: float = 1.0, g_sin: float = 0.1,
                            c_f: float = 0.004, h_sonic: float = None,
                            speed: float = None, L: float = 24.0,
                            T_star: float = 0.25, grid_n: int = 4096) -> RollWave:
    """Periodic traveling wave of the Saint-Venant system with one shock.

    In the frame z = x - st the discharge satisfies q = s h + m0 and the
    depth solves h' = N(h)/D(h) with
        N(h) = g_sin h - c_f (s + m0/h)^2,   D(h) = g_cos h - m0^2/h^2.
    Smooth passage through the sonic point D(h_s) = 0 forces N(h_s) = 0,
    which fixes (s, m0) in terms of h_s.  Both N and D vanish linearly at
    h_s, so the ratio extends analytically: factoring the common root,
        dz/dh = D/N = g_cos (h^2 + h h_s + h_s^2) / (g_sin h^2 + b h + c)
    with b = g_sin h_s - c_f s^2 and c = c_f g_cos h_s^2.  The period map
    is a smooth quadrature of that ratio and the shock depth pair obeys
    h+ h- (h+ + h-) = 2 m0^2 / g_cos.
    """
    if g_cos <= 0 or g_sin <= 0 or c_f <= 0:
        raise NoRollWave("parameters must be positive")
    if g_sin <= 4.0 * c_f * g_cos:
        raise NoRollWave(
            f"no roll-waves: g_sin/(c_f g_cos) = {g_sin / (c_f * g_cos):.3g} <= 4")

    if speed is not None:
        root = speed / (math.sqrt(g_cos) + math.sqrt(g_sin / c_f))
        if root <= 0:
            raise NoRollWave("wave speed must be positive")
        h_s = root * root
    else:
        h_s = 1.0 if h_sonic is None else float(h_sonic)
        if h_s <= 0:
            raise NoRollWave("sonic depth must be positive")
        speed = math.sqrt(g_cos * h_s) + math.sqrt(g_sin * h_s / c_f)
    s = float(speed)
    m0 = -math.sqrt(g_cos) * h_s ** 1.5

    b = g_sin * h_s - c_f * s * s
    cc = c_f * g_cos * h_s * h_s

    def dz_dh(h):
        return g_cos * (h * h + h * h_s + h_s * h_s) / (g_sin * h * h + b * h + cc)

    def dh_dz(z, h):
        return 1.0 / dz_dh(h)

    # depths must stay above the largest extra root of the denominator
    disc = b * b - 4.0 * g_sin * cc
    h_floor = 0.0
    if disc >= 0:
        h_floor = (-b + math.sqrt(disc)) / (2.0 * g_sin)

    K = 2.0 * m0 * m0 / g_cos  # shock relation: h+ h- (h+ + h-) = K

    def h_plus_of(h_minus):
        return (-h_minus ** 2 + math.sqrt(h_minus ** 4 + 4.0 * K * h_minus)) \
            / (2.0 * h_minus)

    def period(h_minus):
        hp = h_plus_of(h_minus)
        val, _ = quad(dz_dh, hp, h_minus, epsabs=1e-13, epsrel=1e-12, limit=200)
        return val

    # bracket the period equation in h-
    lo = h_s * (1.0 + 1e-9)
    if h_floor > 0:
        # h- value whose partner h+ hits the denominator root (period diverges)
        hi_cap = (-h_floor + math.sqrt(h_floor ** 2 + 4.0 * K / h_floor)) / 2.0
        hi = h_s + 0.999 * (hi_cap - h_s)
    else:
        hi = 2.0 * h_s
        while period(hi) < L and hi < 1e6 * h_s:
            hi *= 2.0
    if period(lo) > L:
        raise NoRollWave(f"period {L:g} too short for this parameter set")
    if period(hi) < L:
        raise NoRollWave(f"period {L:g} unattainable: max {period(hi):.6g}")
    h_minus = brentq(lambda hm: period(hm) - L, lo, hi, xtol=1e-14, rtol=1e-15)
    h_plus = h_plus_of(h_minus)
    L_actual = period(h_minus)

    # profile h(z) by integrating the desingularized ODE from the shock
    sol = solve_ivp(dh_dz, (0.0, L_actual), [h_plus], method="DOP853",
                    dense_output=True, rtol=1e-12, atol=1e-13,
                    max_step=L_actual / 50.0)
    if not sol.success:
        raise NoRollWave(f"profile integration failed: {sol.message}")
    end_gap = abs(sol.y[0, -1] - h_minus)
    if end_gap > 1e-8:
        raise NoRollWave(f"profile endpoint mismatch {end_gap:.3e}")

    zg = np.linspace(0.0, L_actual, grid_n + 1)
    hg = sol.sol(zg)[0]
    hg[0], hg[-1] = h_plus, h_minus
    h_spline = CubicSpline(zg, hg, bc_type=((1, 1.0 / dz_dh(h_plus)),
                                            (1, 1.0 / dz_dh(h_minus))))

    def W(h):
        return 1.0 / dz_dh(h)

    def Wprime(h):
        num = g_sin * h * h + b * h + cc
        den = g_cos * (h * h + h * h_s + h_s * h_s)
        dnum = 2.0 * g_sin * h + b
        dden = g_cos * (2.0 * h + h_s)
        return (dnum * den - num * dden) / (den * den)

    def frame_state(z):
        z = np.asarray(z, dtype=float)
        h = h_spline(np.clip(z, 0.0, L_actual))
        return np.stack([h, s * h + m0], axis=-1)

    def frame_dstate(z):
        z = np.asarray(z, dtype=float)
        h = h_spline(np.clip(z, 0.0, L_actual))
        hp = W(h)
        return np.stack([hp, s * hp], axis=-1)

    def frame_d2state(z):
        z = np.asarray(z, dtype=float)
        h = h_spline(np.clip(z, 0.0, L_actual))
        hpp = Wprime(h) * W(h)
        return np.stack([hpp, s * hpp], axis=-1)

    system = saint_venant_system(g_cos, g_sin, c_f)
    u_minus = np.array([h_minus, s * h_minus + m0])
    u_plus = np.array([h_plus, s * h_plus + m0])
    rh = rankine_hugoniot_residual(system, u_minus, u_plus, s)
    if np.abs(rh).max() > 1e-8:
        raise NoRollWave(f"Rankine-Hugoniot residual {np.abs(rh).max():.3e}")
    try:
        k = lax_family(system, u_minus, u_plus, s)
    except Exception as exc:
        raise NoRollWave(f"shock is not Lax: {exc}") from exc
    if lax_margin(system, u_minus, u_plus, s) <= 0:
        raise NoRollWave("vanishing Lax margin")

    return RollWave(system=system, L=float(L_actual), m=1, T_star=T_star,
                    r=float(L_actual) / 4.0, speed=s, x0=0.0,
                    frame_state=frame_state, frame_dstate=frame_dstate,
                    frame_d2state=frame_d2state, lax_index=k,
                    name=f"dressler(h_s={h_s:g},L={L_actual:g})")
