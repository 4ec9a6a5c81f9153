"""Finite-volume solver for the viscous balance law u_t + f(u)_x = g(u) + eps u_xx.

Advection and source are advanced together by a Heun step on a conservative
local Lax-Friedrichs flux with MUSCL/minmod reconstruction; the diffusion is
Strang-split around that step and integrated by Crank-Nicolson, so the time
step is set by the advective CFL condition and never by eps/dx^2.  The
cyclic tridiagonal diffusion solve uses a Sherman-Morrison corner correction
of a plain banded solve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.linalg import solve_banded

from .errors import Blowup, CFLViolation, ConfigError, NonMonotone
from .systems import HyperbolicSystem
from .rollwave import RollWave
from .corrector import CorrectorSet, solve_outer_corrector
from .assembly import assemble_approx_solution

__all__ = [
    "Grid", "Trajectory", "resolved_grid", "cell_averages", "solve_viscous",
    "error_norms", "convergence_study", "dump_trajectory", "load_trajectory",
]

_BLOWUP_LIMIT = 1.0e8
_CFL_DEFAULT = 0.4

# 5-point Gauss-Legendre on [-1/2, 1/2]; exact through degree 9, so cell
# averages of the piecewise-polynomial wave profiles carry no quadrature bias
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
_GL_X = 0.5 * _GL_X
_GL_W = 0.5 * _GL_W


# ---------------------------------------------------------------------------
# grid and trajectory containers


@dataclass(frozen=True)
class Grid:
    """Uniform periodic cell grid on [0, L): N cells of width L/N.

    dt is the advective step the solver will take (it may subdivide to land
    exactly on the final time, never enlarge).  Unknowns live at cell
    centers x_i = (i + 1/2) dx.
    """

    N: int
    L: float
    dt: float

    def __post_init__(self):
        if self.N < 8:
            raise ConfigError(f"grid needs at least 8 cells, got {self.N}")
        if not (self.L > 0.0) or not np.isfinite(self.L):
            raise ConfigError(f"period must be positive, got {self.L!r}")
        if not (self.dt > 0.0) or not np.isfinite(self.dt):
            raise ConfigError(f"time step must be positive, got {self.dt!r}")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dx

    def resolves(self, epsilon: float) -> bool:
        """True when dx <= eps/8, the layer-resolution threshold."""
        return self.dx <= epsilon / 8.0 + 1e-15


def resolved_grid(L: float, epsilon: float, speed_bound: float,
                  cfl: float = _CFL_DEFAULT,
                  refine_below: float = 1e-2) -> Grid:
    """Grid whose cells resolve an eps-wide layer: dx <= eps/8.

    Below `refine_below` the cell width shrinks like eps^(3/2) rather than
    eps, keeping the second-order discretization error decaying faster than
    the eps-scale differences a convergence study measures.
    """
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon:g}")
    if speed_bound <= 0.0:
        raise ConfigError("speed bound must be positive")
    target = (epsilon / 8.0) * min(1.0, math.sqrt(epsilon / refine_below))
    N = int(math.ceil(L / target))
    dt = cfl * (L / N) / speed_bound
    return Grid(N=N, L=L, dt=dt)


def cell_averages(fn: Callable[[np.ndarray], np.ndarray], grid: Grid) -> np.ndarray:
    """Cell averages of fn over the grid by 5-point Gauss-Legendre.

    fn maps an array of positions to field values with a trailing state
    axis; scalar-valued fn is promoted to one component.
    """
    dx = grid.dx
    xq = grid.x[:, None] + dx * _GL_X[None, :]
    vals = np.asarray(fn(xq.ravel()), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    n = vals.shape[-1]
    vals = vals.reshape(grid.N, _GL_X.size, n)
    return np.einsum('q,iqk->ik', _GL_W, vals)


@dataclass
class Trajectory:
    """Snapshots of a viscous run: fields[k] is the state at times[k].

    fields has shape (S, N, n).  meta records the scheme, the step actually
    taken, and the worst advective CFL number observed.
    """

    times: np.ndarray
    fields: np.ndarray
    epsilon: float
    grid: Grid
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.fields.shape[-1]

    def mass(self) -> np.ndarray:
        """Cell-average integral of each component at every stored time."""
        return self.fields.sum(axis=1) * self.grid.dx


# ---------------------------------------------------------------------------
# spatial discretization


def _max_speed(system: HyperbolicSystem, u: np.ndarray) -> np.ndarray:
    """Largest characteristic speed magnitude per cell."""
    A = system.flux_jacobian(u)
    if system.n == 1:
        return np.abs(A[..., 0, 0])
    return np.abs(np.linalg.eigvals(A)).max(axis=-1)


def _minmod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(a * b > 0.0,
                    np.where(np.abs(a) < np.abs(b), a, b),
                    0.0)


def _hyperbolic_rhs(system: HyperbolicSystem, u: np.ndarray, dx: float):
    """Flux-difference + source right-hand side; returns (rhs, max speed).

    MUSCL reconstruction with the minmod limiter feeds a local
    Lax-Friedrichs flux at each interface; the flux difference telescopes,
    so cell-average totals of source-free components are exact.
    """
    um = np.roll(u, 1, axis=0)
    up = np.roll(u, -1, axis=0)
    sig = _minmod(u - um, up - u)
    uL = u + 0.5 * sig
    uR = np.roll(u - 0.5 * sig, -1, axis=0)
    a = np.maximum(_max_speed(system, uL), _max_speed(system, uR))
    F = 0.5 * (system.flux(uL) + system.flux(uR)) - 0.5 * a[:, None] * (uR - uL)
    rhs = -(F - np.roll(F, 1, axis=0)) / dx + system.source(u)
    return rhs, float(a.max())


def _cn_diffuse(u: np.ndarray, r: float) -> np.ndarray:
    """One Crank-Nicolson diffusion step: r = eps * tau / (2 dx^2).

    Solves the cyclic tridiagonal system through a Sherman-Morrison rank-one
    correction: the corner entries are folded into a modified tridiagonal
    matrix plus outer(q, v), and both the data columns and q share one
    banded solve.
    """
    if r == 0.0:
        return u
    N = u.shape[0]
    rhs = u + r * (np.roll(u, 1, axis=0) + np.roll(u, -1, axis=0) - 2.0 * u)
    b = 1.0 + 2.0 * r
    off = -r
    gamma = -b
    ab = np.zeros((3, N))
    ab[0, 1:] = off
    ab[1, :] = b
    ab[2, :-1] = off
    ab[1, 0] = b - gamma
    ab[1, -1] = b - off * off / gamma
    q = np.zeros((N, 1))
    q[0, 0] = gamma
    q[-1, 0] = off
    cols = np.concatenate([rhs, q], axis=1)
    sol = solve_banded((1, 1), ab, cols, check_finite=False)
    y, z = sol[:, :-1], sol[:, -1]
    vy = y[0] + (off / gamma) * y[-1]
    vz = z[0] + (off / gamma) * z[-1]
    return y - z[:, None] * (vy / (1.0 + vz))[None, :]


# ---------------------------------------------------------------------------
# time integration


def solve_viscous(system: HyperbolicSystem, epsilon: float, u0: np.ndarray,
                  T: float, grid: Grid, *, snapshots: int = 100,
                  cfl: float = _CFL_DEFAULT) -> Trajectory:
    """Advance u_t + f(u)_x = g(u) + eps u_xx on the periodic grid to time T.

    The stored t=0 snapshot is u0 exactly as given.  Raises Blowup once any
    value passes 1e8 or stops being finite, and CFLViolation if the observed
    wave speeds ever need more than `cfl` of a cell per step.
    """
    if epsilon < 0.0 or not np.isfinite(epsilon):
        raise ConfigError(f"viscosity must be nonnegative, got {epsilon!r}")
    if not (T > 0.0):
        raise ConfigError(f"final time must be positive, got {T!r}")
    if snapshots < 2:
        raise ConfigError("need at least two snapshots")
    u = np.array(u0, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape != (grid.N, system.n):
        raise ConfigError(
            f"initial data shape {u.shape} does not match grid/system "
            f"({grid.N}, {system.n})")
    if not np.all(np.isfinite(u)):
        raise ConfigError("initial data must be finite")

    steps = max(1, int(math.ceil(T / grid.dt - 1e-12)))
    h = T / steps
    dx = grid.dx
    r_half = epsilon * (0.5 * h) / (2.0 * dx * dx)

    want = np.unique(np.round(
        np.linspace(0.0, steps, min(snapshots, steps + 1))).astype(int))
    stored = [u.copy()]
    stored_t = [0.0]
    next_want = 1

    worst_cfl = 0.0
    for k in range(1, steps + 1):
        u = _cn_diffuse(u, r_half)
        rhs1, a1 = _hyperbolic_rhs(system, u, dx)
        u1 = u + h * rhs1
        rhs2, a2 = _hyperbolic_rhs(system, u1, dx)
        u = 0.5 * (u + u1 + h * rhs2)
        u = _cn_diffuse(u, r_half)

        nu = max(a1, a2) * h / dx
        worst_cfl = max(worst_cfl, nu)
        if nu > cfl * (1.0 + 1e-9):
            raise CFLViolation(
                f"step {k}: speeds need {nu:.3f} of a cell, limit {cfl:g}; "
                f"shrink dt below {cfl * dx / max(a1, a2):.3e}")
        m = np.max(np.abs(u))
        if not np.isfinite(m) or m > _BLOWUP_LIMIT:
            raise Blowup(f"field reached {m:.3e} at t={k * h:.6g}")

        if next_want < want.size and k == want[next_want]:
            stored.append(u.copy())
            stored_t.append(k * h)
            next_want += 1

    meta = {
        "scheme": "muscl-minmod/llf/heun + strang crank-nicolson",
        "cfl_limit": cfl,
        "cfl_observed": worst_cfl,
        "steps": steps,
        "dt": h,
    }
    return Trajectory(times=np.array(stored_t), fields=np.array(stored),
                      epsilon=epsilon, grid=grid, meta=meta)


# ---------------------------------------------------------------------------
# norms and the convergence study


def _reference_values(reference, x: np.ndarray, t: float, n: int) -> np.ndarray:
    vals = np.asarray(reference(x, t), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (x.size, n):
        raise ConfigError(
            f"reference returned shape {vals.shape}, expected {(x.size, n)}")
    return vals


def error_norms(traj: Trajectory, reference, eta: Optional[float] = None,
                rollwave: Optional[RollWave] = None):
    """(max-over-time L1 in x, sup away from the shocks) of traj - reference.

    reference is a callable (x, t) -> field or another Trajectory on the
    same grid and times.  With eta=None the second value is the plain sup
    over everything; with eta set it excludes the eps^eta neighborhood of
    every shock, which requires the wave that knows where the shocks are.
    """
    x = traj.grid.x
    dx = traj.grid.dx
    L = traj.grid.L
    n = traj.n
    if eta is not None:
        if rollwave is None:
            raise ConfigError("away-from-shock norms need the wave")
        radius = traj.epsilon ** eta
        if 2.0 * radius * rollwave.m >= L:
            raise ConfigError(
                f"exclusion radius {radius:g} swallows the whole period")

    if isinstance(reference, Trajectory):
        if reference.grid.N != traj.grid.N or reference.fields.shape != traj.fields.shape:
            raise ConfigError("trajectories must share grid and snapshot count")
        if not np.allclose(reference.times, traj.times, atol=1e-12):
            raise ConfigError("trajectories must share snapshot times")
        ref_at = lambda k: reference.fields[k]
    else:
        ref_at = lambda k: _reference_values(reference, x, float(traj.times[k]), n)

    linf_l1 = 0.0
    away = 0.0
    for k in range(traj.times.size):
        diff = np.abs(traj.fields[k] - ref_at(k))
        linf_l1 = max(linf_l1, float(diff.sum() * dx))
        if eta is None:
            away = max(away, float(diff.max()))
        else:
            t = float(traj.times[k])
            shocks = np.array([rollwave.shock_position(j, t)
                               for j in range(1, rollwave.m + 1)])
            d = np.abs((x[:, None] - shocks[None, :] + L / 2.0) % L - L / 2.0)
            keep = d.min(axis=1) >= radius
            if keep.any():
                away = max(away, float(diff[keep].max()))
    return linf_l1, away


def _wave_speed_bound(rollwave: RollWave) -> float:
    z = np.linspace(0.0, rollwave.L, 2049)
    u = rollwave.frame_state(z)
    A = rollwave.system.flux_jacobian(u)
    if rollwave.system.n == 1:
        smax = float(np.abs(A[..., 0, 0]).max())
    else:
        smax = float(np.abs(np.linalg.eigvals(A)).max())
    return 1.25 * max(smax, abs(rollwave.speed), 1e-3)


def _loglog_slope(eps: np.ndarray, vals: np.ndarray) -> float:
    if np.any(vals <= 0.0):
        return math.inf
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


def convergence_study(system: HyperbolicSystem, rollwave: RollWave,
                      eps_list: Sequence[float], eta: float = 0.5, *,
                      correctors: Optional[CorrectorSet] = None,
                      gamma: float = 0.75, T: Optional[float] = None,
                      snapshots: int = 100, cfl: float = _CFL_DEFAULT,
                      refine_below: float = 1e-2) -> dict:
    """Run the viscous solver across eps_list and tabulate the four norms.

    Columns: L1-in-x error against the inviscid wave, the same against the
    composite approximation, the sup against the composite approximation,
    and the sup against the inviscid wave away from eps^eta shock
    neighborhoods.  Every column must decrease strictly with eps and the
    composite must beat the inviscid wave at the smallest eps; any failure
    raises NonMonotone carrying the full table on its .report attribute.

    Norms run over the stored times after the initial instant: the
    prescribed datum is the sharp inviscid wave, so its distance to the
    smooth composite is fixed by that choice of data, not by the solution
    operator, and would mask the decay being measured.
    """
    if rollwave.system is not system:
        raise ConfigError("wave was built for a different system")
    eps = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    if eps.size < 2:
        raise ConfigError("need at least two viscosity values")
    if eps[0] >= 1.0 or eps[-1] <= 0.0:
        raise ConfigError("viscosities must lie in (0, 1)")
    if np.unique(eps).size != eps.size:
        raise ConfigError("viscosity values must be distinct")
    if T is None:
        T = rollwave.T_star
    if correctors is None:
        correctors = solve_outer_corrector(rollwave, order=2)

    bound = _wave_speed_bound(rollwave)
    cols = {"u.LinfL1": [], "uapp.LinfL1": [], "uapp.sup": [], "u.away_sup": []}
    grids = []
    for e in eps:
        grid = resolved_grid(rollwave.L, e, bound, cfl, refine_below)
        u0 = cell_averages(lambda x: rollwave.field(x, 0.0), grid)
        traj = solve_viscous(system, e, u0, T, grid,
                             snapshots=snapshots, cfl=cfl)
        formed = Trajectory(times=traj.times[1:], fields=traj.fields[1:],
                            epsilon=e, grid=grid, meta=traj.meta)
        ap = assemble_approx_solution(rollwave, correctors, e, gamma)
        l1_u, away_u = error_norms(formed, rollwave.field, eta, rollwave)
        l1_app, sup_app = error_norms(formed, ap.u_app, None)
        cols["u.LinfL1"].append(l1_u)
        cols["uapp.LinfL1"].append(l1_app)
        cols["uapp.sup"].append(sup_app)
        cols["u.away_sup"].append(away_u)
        grids.append(grid.N)

    report = {
        "eps": eps.tolist(),
        "eta": eta,
        "gamma": gamma,
        "T": T,
        "grid_N": grids,
        "norms": {k: list(map(float, v)) for k, v in cols.items()},
        "slope_app_L1": _loglog_slope(eps, np.asarray(cols["uapp.LinfL1"])),
        "away_ratio": (cols["u.away_sup"][-1] / cols["u.away_sup"][0]
                       if cols["u.away_sup"][0] > 0.0 else 0.0),
    }

    _check_convergence_report(report)
    return report


def _check_convergence_report(report: dict) -> None:
    """Post-conditions of a convergence table; NonMonotone carries it back."""

    def _fail(msg):
        err = NonMonotone(msg)
        err.report = report
        raise err

    cols = report["norms"]
    for name, vals in cols.items():
        v = np.asarray(vals)
        if not np.all(np.diff(v) < 0.0):
            _fail(f"{name} is not strictly decreasing: {v.tolist()}")
    if cols["uapp.LinfL1"][-1] > cols["u.LinfL1"][-1]:
        _fail("composite approximation is no closer than the inviscid wave "
              f"at eps={report['eps'][-1]:g}")
    if report["slope_app_L1"] < 1.0:
        _fail(f"composite L1 error decays with slope "
              f"{report['slope_app_L1']:.3f}, below 1")


# ---------------------------------------------------------------------------
# trajectory serialization: JSON header next to flat 64-bit rows


def dump_trajectory(traj: Trajectory, basepath: str) -> None:
    """Write basepath.json (header) and basepath.bin (row-major float64)."""
    header = {
        "N": traj.grid.N,
        "L": traj.grid.L,
        "n": traj.n,
        "epsilon": traj.epsilon,
        "dt": traj.grid.dt,
        "times": traj.times.tolist(),
        "meta": traj.meta,
    }
    with open(basepath + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
    traj.fields.astype(np.float64).tofile(basepath + ".bin")


def load_trajectory(basepath: str) -> Trajectory:
    with open(basepath + ".json") as fh:
        header = json.load(fh)
    times = np.asarray(header["times"], dtype=float)
    N, n = int(header["N"]), int(header["n"])
    raw = np.fromfile(basepath + ".bin", dtype=np.float64)
    fields = raw.reshape(times.size, N, n)
    grid = Grid(N=N, L=float(header["L"]), dt=float(header["dt"]))
    return Trajectory(times=times, fields=fields,
                      epsilon=float(header["epsilon"]), grid=grid,
                      meta=dict(header.get("meta", {})))
