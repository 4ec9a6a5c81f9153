import numpy as np
import pytest

from rollwaves.systems import HyperbolicSystem, burgers_system
from rollwaves.rollwave import build_sawtooth_rollwave
from rollwaves.viscous import (Grid, Trajectory, resolved_grid, cell_averages,
                               solve_viscous, error_norms, convergence_study,
                               dump_trajectory, load_trajectory,
                               _check_convergence_report)
from rollwaves.errors import (Blowup, CFLViolation, ConfigError, NonMonotone)


def _zero_field(u):
    return np.zeros_like(np.asarray(u, dtype=float))


def _zero_jac(u):
    u = np.asarray(u, dtype=float)
    return np.zeros(u.shape[:-1] + (1, 1))


def heat_system():
    """No flux, no source: u_t = eps u_xx."""
    return HyperbolicSystem(n=1, flux=_zero_field, source=_zero_field,
                            flux_jacobian=_zero_jac, source_jacobian=_zero_jac,
                            name="heat")


def advection_free_burgers():
    """Burgers flux with no source, for conservation checks."""

    def flux(u):
        u = np.asarray(u, dtype=float)
        return 0.5 * u * u

    def fjac(u):
        u = np.asarray(u, dtype=float)
        return u[..., None]

    return HyperbolicSystem(n=1, flux=flux, source=_zero_field,
                            flux_jacobian=fjac, source_jacobian=_zero_jac,
                            name="burgers-conservative")


def quadratic_growth_system():
    """u_t = u^2: finite-time blowup from positive data."""

    def src(u):
        u = np.asarray(u, dtype=float)
        return u * u

    def sjac(u):
        u = np.asarray(u, dtype=float)
        return 2.0 * u[..., None]

    return HyperbolicSystem(n=1, flux=_zero_field, source=src,
                            flux_jacobian=_zero_jac, source_jacobian=sjac,
                            name="quadratic-growth")


# ---------------------------------------------------------------------------
# grid and cell averages


def test_grid_geometry():
    g = Grid(N=16, L=4.0, dt=0.01)
    assert g.dx == pytest.approx(0.25, abs=0)
    assert g.x[0] == pytest.approx(0.125, abs=0)
    assert g.x[-1] == pytest.approx(4.0 - 0.125, abs=1e-15)
    assert g.x.size == 16


def test_grid_validation():
    with pytest.raises(ConfigError):
        Grid(N=4, L=1.0, dt=0.01)
    with pytest.raises(ConfigError):
        Grid(N=32, L=-1.0, dt=0.01)
    with pytest.raises(ConfigError):
        Grid(N=32, L=1.0, dt=0.0)


def test_resolved_grid_resolves_the_layer():
    g = resolved_grid(2.0, 1e-2, speed_bound=1.3)
    assert g.dx <= 1e-2 / 8.0 + 1e-15
    assert g.resolves(1e-2)
    assert not Grid(N=64, L=2.0, dt=1e-3).resolves(1e-2)
    # below the refinement knee the cells shrink faster than eps
    g2 = resolved_grid(2.0, 2.5e-3, speed_bound=1.3)
    assert g2.dx <= (2.5e-3 / 8.0) * 0.5 + 1e-15
    with pytest.raises(ConfigError):
        resolved_grid(2.0, -1e-3, speed_bound=1.0)
    with pytest.raises(ConfigError):
        resolved_grid(2.0, 1e-3, speed_bound=0.0)


def test_cell_averages_exact_for_polynomials():
    g = Grid(N=40, L=2.0, dt=0.1)
    # a linear field averages to its cell-center value
    lin = cell_averages(lambda x: 3.0 * x - 1.0, g)
    assert np.allclose(lin[:, 0], 3.0 * g.x - 1.0, atol=1e-13)
    # quadratic: average of x^2 over [a, b] is (a^2 + ab + b^2)/3
    quad = cell_averages(lambda x: x * x, g)
    edges = np.arange(41) * g.dx
    a, b = edges[:-1], edges[1:]
    assert np.allclose(quad[:, 0], (a * a + a * b + b * b) / 3.0, atol=1e-13)
    assert quad.shape == (40, 1)


# ---------------------------------------------------------------------------
# diffusion accuracy and conservation


def test_heat_mode_decay_rate():
    sysh = heat_system()
    L = 2.0 * np.pi
    T = 0.1
    k = 2
    g = Grid(N=512, L=L, dt=T / 200)
    u0 = cell_averages(lambda x: np.cos(k * x), g)
    traj = solve_viscous(sysh, 1.0, u0, T, g)
    uT = traj.fields[-1][:, 0]
    amp = uT.max() / np.cos(k * g.x).max()
    assert amp == pytest.approx(np.exp(-k * k * T), rel=1e-2)
    exact = np.cos(k * g.x) * np.exp(-k * k * T)
    assert np.abs(uT - exact).max() < 1e-2


def test_diffusion_conserves_mass():
    sysh = heat_system()
    g = Grid(N=256, L=1.0, dt=1e-3)
    u0 = cell_averages(lambda x: np.sin(2 * np.pi * x) + 0.3, g)
    traj = solve_viscous(sysh, 0.5, u0, 0.2, g)
    drift = np.abs(traj.mass()[:, 0] - traj.mass()[0, 0]).max()
    assert drift <= traj.meta["steps"] * 1e-10
    assert drift < 1e-12


def test_flux_differencing_conserves_mass():
    sysb = advection_free_burgers()
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=400, L=2.0, dt=0.4 * (2.0 / 400) / 1.3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(sysb, 5e-3, u0, 0.3, g)
    drift = np.abs(traj.mass()[:, 0] - traj.mass()[0, 0]).max()
    assert drift <= traj.meta["steps"] * 1e-10
    assert drift < 1e-12


# ---------------------------------------------------------------------------
# solver basics


def test_initial_snapshot_is_the_given_data():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=128, L=2.0, dt=1e-3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, 0.05, u0, 0.05, g, snapshots=5)
    assert traj.times[0] == 0.0
    assert np.array_equal(traj.fields[0], u0)
    assert traj.times[-1] == pytest.approx(0.05, abs=1e-14)
    assert traj.times.size == 5


def test_solver_input_validation():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=64, L=2.0, dt=1e-3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    with pytest.raises(ConfigError):
        solve_viscous(rw.system, -1e-2, u0, 0.1, g)
    with pytest.raises(ConfigError):
        solve_viscous(rw.system, 1e-2, u0, 0.0, g)
    with pytest.raises(ConfigError):
        solve_viscous(rw.system, 1e-2, u0[:10], 0.1, g)
    with pytest.raises(ConfigError):
        solve_viscous(rw.system, 1e-2, u0, 0.1, g, snapshots=1)
    bad = u0.copy()
    bad[3] = np.nan
    with pytest.raises(ConfigError):
        solve_viscous(rw.system, 1e-2, bad, 0.1, g)


def test_periodic_translation_equivariance():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=256, L=2.0, dt=0.4 * (2.0 / 256) / 1.3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    k = 37
    t1 = solve_viscous(rw.system, 0.05, u0, 0.2, g, snapshots=3)
    t2 = solve_viscous(rw.system, 0.05, np.roll(u0, k, axis=0), 0.2, g,
                       snapshots=3)
    gap = np.abs(np.roll(t1.fields[-1], k, axis=0) - t2.fields[-1]).max()
    assert gap < 1e-12


def test_cfl_violation_raises():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=64, L=2.0, dt=0.4)   # 12.8 cells per step at unit speed
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    with pytest.raises(CFLViolation):
        solve_viscous(rw.system, 1e-2, u0, 1.2, g)


def test_blowup_raises():
    sysq = quadratic_growth_system()
    g = Grid(N=8, L=1.0, dt=1e-3)
    u0 = np.full((8, 1), 10.0)
    with pytest.raises(Blowup):
        solve_viscous(sysq, 0.0, u0, 1.0, g)


# ---------------------------------------------------------------------------
# the steady viscous layer


def test_steady_state_layer_matches_scaled_tanh():
    # relaxation from the sharp sawtooth reaches the steady viscous wave;
    # within 2 eps of the shock the layer is the hyperbolic-tangent profile
    # to 2 percent of the jump (the eps-order background accounts for most
    # of that budget, the solver error is two orders smaller)
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    eps = 1e-2
    g = resolved_grid(2.0, eps, speed_bound=1.3, refine_below=eps)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, eps, u0, 3.0, g)
    uT = traj.fields[-1][:, 0]
    settle = np.abs(traj.fields[-1] - traj.fields[-2]).max()
    assert settle < 1e-10
    xi = (g.x + 1.0) % 2.0 - 1.0
    win = np.abs(xi) <= 2.0 * eps
    jump = 2.0
    layer_err = np.abs(uT[win] + np.tanh(xi[win] / (2.0 * eps))).max()
    assert layer_err <= 0.02 * jump
    # steepest gradient sits at the shock
    i = np.abs(np.diff(uT)).argmax()
    xg = 0.5 * (g.x[i] + g.x[i + 1])
    assert abs((xg + 1.0) % 2.0 - 1.0) <= 2.0 * g.dx


def test_self_convergence_order():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    eps = 1e-2
    final = {}
    for N in (800, 1600, 3200):
        g = Grid(N=N, L=2.0, dt=0.4 * (2.0 / N) / 1.3)
        u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
        final[N] = solve_viscous(rw.system, eps, u0, 0.25, g,
                                 snapshots=2).fields[-1][:, 0]

    def coarsen(f):
        return 0.5 * (f[0::2] + f[1::2])

    e_coarse = np.abs(final[800] - coarsen(final[1600])).sum() * (2.0 / 800)
    e_fine = np.abs(final[1600] - coarsen(final[3200])).sum() * (2.0 / 1600)
    assert e_coarse / e_fine >= 3.5


# ---------------------------------------------------------------------------
# error norms


def test_error_norms_of_trajectory_against_itself():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=128, L=2.0, dt=2e-3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, 0.02, u0, 0.1, g, snapshots=6)
    assert error_norms(traj, traj) == (0.0, 0.0)


def test_error_norms_validation():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=64, L=2.0, dt=2e-3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, 0.02, u0, 0.05, g, snapshots=3)
    with pytest.raises(ConfigError):
        error_norms(traj, rw.field, 0.5)          # eta without the wave
    with pytest.raises(ConfigError):
        error_norms(traj, lambda x, t: np.zeros(5))  # wrong shape
    other = solve_viscous(rw.system, 0.02, u0, 0.05, g, snapshots=4)
    with pytest.raises(ConfigError):
        error_norms(traj, other)                  # mismatched snapshots

    class Crowded:
        m = 3
        def shock_position(self, j, t):
            return 0.7 * (j - 1)

    with pytest.raises(ConfigError):
        error_norms(traj, rw.field, 0.01, Crowded())


def test_away_sup_excludes_the_layer():
    # moving wave: the viscous solution differs from the inviscid one by
    # O(1) at the layer but only by an exponential tail eps^(1/2) away
    rw = build_sawtooth_rollwave(L=2.0, c=0.7)
    eps = 1e-3
    g = resolved_grid(2.0, eps, speed_bound=2.5, refine_below=eps)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, eps, u0, 0.05, g, snapshots=6)
    _, away = error_norms(traj, rw.field, 0.5, rw)
    _, full = error_norms(traj, rw.field, None)
    assert full >= 0.5
    assert away <= full / 10.0
    # the steepest-gradient point tracks the moving shock
    gamma = 0.75
    for k in range(1, traj.times.size):
        t = float(traj.times[k])
        u = traj.fields[k][:, 0]
        i = np.abs(np.diff(u)).argmax()
        xg = 0.5 * (g.x[i] + g.x[i + 1])
        X = rw.shock_position(1, t)
        dist = abs((xg - X + 1.0) % 2.0 - 1.0)
        assert dist <= 3.0 * eps ** gamma


# ---------------------------------------------------------------------------
# the convergence study


def test_convergence_study_sawtooth():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    report = convergence_study(rw.system, rw, [1e-2, 5e-3, 2.5e-3], eta=0.5)
    norms = report["norms"]
    assert sorted(norms) == ["u.LinfL1", "u.away_sup", "uapp.LinfL1",
                             "uapp.sup"]
    for vals in norms.values():
        assert len(vals) == 3
        assert all(b < a for a, b in zip(vals, vals[1:]))
    # composite beats the inviscid wave at every viscosity here
    assert all(a <= u for a, u in zip(norms["uapp.LinfL1"], norms["u.LinfL1"]))
    assert report["away_ratio"] <= 0.25
    assert report["slope_app_L1"] >= 1.0
    assert report["grid_N"] == sorted(report["grid_N"])
    assert report["eps"] == [1e-2, 5e-3, 2.5e-3]


def test_convergence_study_validation():
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    with pytest.raises(ConfigError):
        convergence_study(rw.system, rw, [1e-2])
    with pytest.raises(ConfigError):
        convergence_study(rw.system, rw, [1e-2, 1e-2])
    with pytest.raises(ConfigError):
        convergence_study(burgers_system(0.0), rw, [1e-2, 5e-3])


def _synthetic_report(**overrides):
    rep = {
        "eps": [1e-2, 5e-3, 2.5e-3],
        "norms": {
            "u.LinfL1": [4.0, 2.0, 1.0],
            "uapp.LinfL1": [2.0, 1.0, 0.4],
            "uapp.sup": [0.3, 0.2, 0.1],
            "u.away_sup": [1e-4, 1e-5, 1e-6],
        },
        "slope_app_L1": 1.2,
    }
    rep.update(overrides)
    return rep


def test_report_checks_pass_on_decreasing_table():
    _check_convergence_report(_synthetic_report())


def test_report_checks_catch_flat_column():
    rep = _synthetic_report()
    rep["norms"]["uapp.sup"] = [0.3, 0.3, 0.1]
    with pytest.raises(NonMonotone) as exc:
        _check_convergence_report(rep)
    assert exc.value.report is rep


def test_report_checks_catch_composite_not_closer():
    rep = _synthetic_report()
    rep["norms"]["uapp.LinfL1"] = [5.0, 3.0, 1.5]
    with pytest.raises(NonMonotone):
        _check_convergence_report(rep)


def test_report_checks_catch_shallow_slope():
    with pytest.raises(NonMonotone):
        _check_convergence_report(_synthetic_report(slope_app_L1=0.7))


# ---------------------------------------------------------------------------
# serialization


def test_trajectory_dump_and_load_roundtrip(tmp_path):
    rw = build_sawtooth_rollwave(L=2.0, c=0.0)
    g = Grid(N=64, L=2.0, dt=2e-3)
    u0 = cell_averages(lambda x: rw.field(x, 0.0), g)
    traj = solve_viscous(rw.system, 0.02, u0, 0.05, g, snapshots=4)
    base = str(tmp_path / "run")
    dump_trajectory(traj, base)
    back = load_trajectory(base)
    assert np.array_equal(back.fields, traj.fields)
    assert np.array_equal(back.times, traj.times)
    assert back.epsilon == traj.epsilon
    assert back.grid.N == traj.grid.N
    assert back.grid.L == traj.grid.L
    assert back.meta["scheme"] == traj.meta["scheme"]
