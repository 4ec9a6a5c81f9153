import json
import types

import numpy as np
import pytest

import rollwaves as rwk
from rollwaves.assembly import (_norm_grid, _PlateauPartition, build_phi,
                                certify_scaling, evaluate_u_app,
                                evaluate_u_app_z_frame, stretched_xi)
from rollwaves.cutoff import CutoffConfig
from rollwaves.errors import (ConfigError, NotMonotone, ScalingViolation)

GAMMA = 0.75
LADDER = [2.0 ** (-k) for k in range(6, 13)]


@pytest.fixture(scope="module")
def saw():
    return rwk.build_sawtooth_rollwave(L=2.0, c=0.0)


@pytest.fixture(scope="module")
def saw_cs(saw):
    return rwk.solve_outer_corrector(saw, order=2)


@pytest.fixture(scope="module")
def saw7():
    return rwk.build_sawtooth_rollwave(L=2.0, c=0.7)


@pytest.fixture(scope="module")
def saw7_cs(saw7):
    return rwk.solve_outer_corrector(saw7, order=2)


@pytest.fixture(scope="module")
def saw12():
    return rwk.build_sawtooth_rollwave(L=12.0, c=0.0)


@pytest.fixture(scope="module")
def saw12_cs(saw12):
    return rwk.solve_outer_corrector(saw12, order=2)


@pytest.fixture(scope="module")
def dressler():
    return rwk.build_dressler_rollwave()


@pytest.fixture(scope="module")
def dressler_cs(dressler):
    return rwk.solve_outer_corrector(dressler, order=1)


def fd4(f, x, h):
    """Fourth-order central difference."""
    return (8.0 * (f(x + h) - f(x - h)) - (f(x + 2 * h) - f(x - 2 * h))) \
        / (12.0 * h)


def wiggly_wave(amplitude):
    """Synthetic three-shock wave with independently drifting shocks."""
    return types.SimpleNamespace(
        m=3, L=6.0, T_star=1.0, speed=0.0,
        shock_position=lambda j, t: (j - 1) * 2.0
        + amplitude * np.sin(t + 2.0944 * j))


# ---------------------------------------------------------------------------
# cutoff

def test_cutoff_plateau_and_support():
    xs_in = np.linspace(-0.999, 0.999, 41)
    assert np.all(CutoffConfig.mu(xs_in) == 1.0)
    xs_out = np.concatenate([np.linspace(2.001, 5.0, 41),
                             np.linspace(-5.0, -2.001, 41)])
    assert np.all(CutoffConfig.mu(xs_out) == 0.0)
    xs = np.linspace(-3.0, 3.0, 2001)
    w = CutoffConfig.mu(xs)
    assert np.all((w >= 0.0) & (w <= 1.0))
    assert np.max(np.abs(CutoffConfig.mu(xs) - CutoffConfig.mu(-xs))) == 0.0


def test_cutoff_one_sided_plateaus():
    assert float(CutoffConfig.Kplus(0.5)) == 0.0
    assert float(CutoffConfig.Kplus(2.5)) == 1.0
    assert float(CutoffConfig.Kminus(-2.5)) == 1.0
    assert float(CutoffConfig.Kminus(0.5)) == 0.0


def test_cutoff_product_identity_pointwise():
    cfg = CutoffConfig(gamma=GAMMA)
    assert cfg.identity_defect(np.linspace(-3.0, 3.0, 4001)) <= 1e-12


def test_cutoff_derivative_chain_matches_fd():
    xs = np.linspace(-2.6, 2.6, 301)
    h = 1e-4
    d1 = fd4(CutoffConfig.mu, xs, h)
    assert np.max(np.abs(CutoffConfig.mu(xs, 1) - d1)) <= 1e-8
    d2 = fd4(lambda x: CutoffConfig.mu(x, 1), xs, h)
    assert np.max(np.abs(CutoffConfig.mu(xs, 2) - d2)) <= 1e-7
    ch = CutoffConfig.mu_chain(xs)
    assert ch.shape[0] == 5
    for k in range(3):
        assert np.max(np.abs(ch[k] - CutoffConfig.mu(xs, k))) <= 1e-12


def test_cutoff_exponent_domain():
    for bad in (0.5, 2.0 / 3.0, 1.0, 1.2):
        with pytest.raises(ConfigError):
            CutoffConfig(gamma=bad)
    assert CutoffConfig(gamma=GAMMA).gamma == GAMMA


# ---------------------------------------------------------------------------
# stretched coordinate

def test_stretched_xi_zero_at_shock(saw7):
    t = 0.4
    x = saw7.shock_position(1, t)
    assert float(stretched_xi(saw7, 1, x, t, 0.01)) == 0.0


def test_stretched_xi_shifted_value(saw):
    x = saw.shock_position(1, 0.0) + 0.1
    val = float(stretched_xi(saw, 1, x, 0.0, 0.1, delta0=0.5))
    assert val == pytest.approx(1.5, abs=1e-14)


def test_stretched_xi_frame_roundtrip(saw7):
    eps, t, d0 = 0.05, 0.3, 0.25
    pm = build_phi(saw7, d0, eps)
    zs = np.linspace(-0.8, 0.8, 17)
    xi = stretched_xi(saw7, 1, pm.value(zs, t), t, eps, delta0=d0)
    assert np.max(np.abs(xi - zs / eps)) <= 1e-9


# ---------------------------------------------------------------------------
# shock-fitting frame map

def test_phi_identity_for_resting_sawtooth(saw):
    pm = build_phi(saw, 0.0, 0.01)
    zs = np.linspace(-1.0, 3.0, 101)
    assert np.array_equal(pm.value(zs, 0.7), zs)
    assert np.all(pm.dz(zs, 0.7) == 1.0)
    assert np.all(pm.dzz(zs, 0.7) == 0.0)
    assert np.all(pm.dt(zs, 0.7) == 0.0)
    assert pm.min_dz_observed == 1.0
    a = pm.alpha(zs)
    assert a.shape == zs.shape + (1,)
    assert np.all(a == 1.0)


def test_phi_tracks_moving_shock(saw7, saw7_cs):
    eps, t = 2.0 ** -6, 0.3
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, eps)
    shift = ap.phi.value(0.0, t)
    zs = np.linspace(-0.9, 0.9, 31)
    assert np.ptp(ap.phi.value(zs, t) - zs) <= 1e-14
    assert abs(shift - saw7.shock_position(1, t)) <= 1e-9
    assert np.max(np.abs(ap.phi.dt(zs, t) - saw7.speed)) <= 1e-9
    # the fitted field keeps its internal layer at the frame origin
    zg = np.linspace(-2.0 * eps, 2.0 * eps, 801)
    ug = evaluate_u_app_z_frame(ap, zg, t)[:, 0]
    i = int(np.argmax(np.abs(np.diff(ug))))
    z_center = 0.5 * (zg[i] + zg[i + 1])
    assert abs(z_center) <= eps / 10.0


def test_phi_partition_three_shocks():
    rw = wiggly_wave(0.05)
    pm = build_phi(rw, 0.0, 0.01)
    t = 0.6
    zs = np.linspace(0.0, rw.L, 1201)
    a0, a1, _ = pm.partition.alpha(zs)
    assert np.max(np.abs(a0.sum(axis=-1) - 1.0)) <= 1e-12
    assert np.max(np.abs(a1.sum(axis=-1))) <= 1e-10
    # rigid translation on each plateau, exactly
    sh = pm._shifts(t)
    r = pm.partition.r
    for j in range(3):
        zp = (j * 2.0) + np.linspace(-r, r, 21)
        assert np.array_equal(pm.value(zp, t), zp + sh[j])
    # derivative consistency across the blending zones
    h = 1e-5
    dfd = (pm.value(zs + h, t) - pm.value(zs - h, t)) / (2.0 * h)
    assert np.max(np.abs(pm.dz(zs, t) - dfd)) <= 1e-8
    d2fd = (pm.dz(zs + h, t) - pm.dz(zs - h, t)) / (2.0 * h)
    assert np.max(np.abs(pm.dzz(zs, t) - d2fd)) <= 1e-6
    assert 0.0 < pm.min_dz_observed < 1.0


def test_phi_partition_spacing_guards():
    with pytest.raises(ConfigError):
        _PlateauPartition([0.0, 2.0, 4.0], 6.0, 0.9)   # ramps hit plateaus
    with pytest.raises(ConfigError):
        _PlateauPartition([0.0, 1.0, 4.0], 6.0, 0.5)   # close pair
    assert _PlateauPartition([0.0, 2.0, 4.0], 6.0, 0.5).w == 0.25


def test_phi_rejects_lost_monotonicity():
    with pytest.raises(NotMonotone):
        build_phi(wiggly_wave(0.5), 0.0, 0.01)


# ---------------------------------------------------------------------------
# assembly guards

def test_assemble_input_guards(saw, saw_cs, saw7_cs):
    with pytest.raises(ConfigError):
        rwk.assemble_approx_solution(saw, saw7_cs, 0.01)
    for bad_eps in (0.0, 1.5, -0.1):
        with pytest.raises(ConfigError):
            rwk.assemble_approx_solution(saw, saw_cs, bad_eps)
    with pytest.raises(ConfigError):
        rwk.assemble_approx_solution(saw, saw_cs, 0.01, gamma=0.5)
    with pytest.raises(ConfigError):
        # cutoff zones would crowd the cell
        rwk.assemble_approx_solution(saw, saw_cs, 0.4)


# ---------------------------------------------------------------------------
# composite field

def test_u_app_plateau_equalities_exact(saw7, saw7_cs):
    eps, t = 2.0 ** -8, 0.3
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, eps)
    X = saw7.shock_position(1, t)
    egam = eps ** GAMMA
    far = X + np.concatenate([np.linspace(3.0 * egam, 0.9, 40),
                              np.linspace(-0.9, -3.0 * egam, 40)])
    u = evaluate_u_app(ap, far, t)
    assert np.array_equal(u, np.asarray(ap.outer(far, t)).reshape(u.shape))
    near = X + np.linspace(-0.95, 0.95, 31) * egam
    u_in = ap.u_app(near, t)
    assert np.array_equal(
        u_in, np.asarray(ap.inner(1, near, t)).reshape(u_in.shape))


def test_u_app_layer_matches_profile(saw, saw_cs):
    eps = 1e-3
    ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
    prof = saw_cs.profiles[1]
    xi = np.linspace(-4.0, 4.0, 401)
    u = ap.u_app(eps * xi, 0.0)[:, 0]
    assert np.max(np.abs(u - np.asarray(prof.state(xi)))) <= 1e-2
    # away from the layer the composite reproduces the wave exactly
    xs_far = np.linspace(0.2, 0.8, 50)
    diff = ap.u_app(xs_far, 0.0) - np.asarray(
        saw.field(xs_far, 0.0)).reshape(-1, 1)
    assert np.max(np.abs(diff)) == 0.0
    # at the shock it resolves the jump through the profile interior
    mid = float(ap.u_app(0.0, 0.0)[0])
    assert abs(mid - float(np.asarray(saw.field(0.0, 0.0)).reshape(-1)[0])) \
        >= 0.5


def test_u_app_x_fd_cross_validation(saw7, saw7_cs):
    rng = np.random.default_rng(7)
    eps, t = 2.0 ** -6, 0.3
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, eps)
    X = saw7.shock_position(1, t)
    xs = X + np.concatenate([
        rng.uniform(-3.0 * eps ** GAMMA, 3.0 * eps ** GAMMA, 60),
        rng.uniform(-0.9, 0.9, 40)])
    h = eps / 300.0
    for order in (1, 2, 3, 4):
        if order == 1:
            f = lambda x: ap.u_app(x, t)
        else:
            f = lambda x: ap.u_app_x(x, t, order - 1)
        an = ap.u_app_x(xs, t, order)
        rel = np.max(np.abs(an - fd4(f, xs, h))) / np.max(np.abs(an))
        assert rel <= 1e-5, f"derivative order {order}: {rel:.2e}"
    with pytest.raises(ConfigError):
        ap.u_app_x(xs, t, 5)


def test_u_app_t_matches_translation(saw7, saw7_cs):
    rng = np.random.default_rng(11)
    eps, t = 2.0 ** -6, 0.3
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, eps)
    xs = saw7.shock_position(1, t) + rng.uniform(-0.9, 0.9, 100)
    an = ap.u_app_t(xs, t)
    fd = fd4(lambda u: ap.u_app(xs, u), t, 1e-5)
    assert np.max(np.abs(an - fd)) / np.max(np.abs(an)) <= 1e-5


def test_degraded_tier_for_system_wave(dressler, dressler_cs):
    eps, t = 2.0 ** -6, 0.1
    ap = rwk.assemble_approx_solution(dressler, dressler_cs, eps)
    X = dressler.shock_position(1, t)
    xs = X + np.linspace(-1.0, 1.0, 41)
    u = ap.u_app(xs, t)
    assert u.shape == (41, 2)
    assert np.all(np.isfinite(u))
    assert np.all(np.isfinite(ap.u_app_x(xs, t, 1)))
    assert np.all(np.isfinite(ap.u_app_z_frame(np.linspace(0, 1, 9), t)))
    assert ap.phi.min_dz_observed == 1.0
    far = X + np.linspace(4.0, 8.0, 21)
    uf = ap.u_app(far, t)
    assert np.array_equal(uf, np.asarray(ap.outer(far, t)).reshape(uf.shape))
    with pytest.raises(ConfigError):
        ap.u_app_x(xs, t, 2)
    with pytest.raises(ConfigError):
        ap.residual_field(t)


# ---------------------------------------------------------------------------
# residual

def test_residual_far_zone_vanishes(saw, saw_cs):
    eps = 2.0 ** -8
    ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
    fld = ap.residual_field(0.1)
    zs = np.concatenate([np.linspace(0.15, 0.85, 60),
                         np.linspace(-0.85, -0.15, 60)])
    assert np.max(np.abs(fld.value(zs))) <= 1e-12


def test_residual_dual_groupings_agree(saw, saw_cs):
    for eps in (2.0 ** -8, 2.0 ** -12):
        ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
        fld = ap.residual_field(0.1)
        zs = _norm_grid(saw.L, eps, GAMMA)
        qa, qb = fld.routes(zs)
        scale = max(np.max(np.abs(qa)), np.max(np.abs(qb)))
        assert np.max(np.abs(qa - qb)) <= 1e-6 * scale
        # the checked sampler accepts its own output
        q = fld.value(zs, check=True)
        assert np.array_equal(q, np.asarray(qa, dtype=float))


def test_residual_piece_supports(saw, saw_cs):
    eps = 2.0 ** -8
    ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
    fld = ap.residual_field(0.1)
    egam = eps ** GAMMA
    center = eps * fld.delta_eff
    z_in = center + np.linspace(-0.95, 0.95, 41) * egam
    z_ann = center + np.concatenate([np.linspace(1.05, 1.95, 41),
                                     np.linspace(-1.95, -1.05, 41)]) * egam
    z_far = np.concatenate([np.linspace(0.2, 0.8, 41),
                            np.linspace(-0.8, -0.2, 41)])
    for zs in (z_in, z_ann, z_far):
        q1, _, _ = fld.pieces(zs)
        assert np.max(np.abs(q1)) == 0.0
    _, q2_far, q3_far = fld.pieces(z_far)
    assert np.max(np.abs(q2_far)) == 0.0
    assert np.max(np.abs(q3_far)) == 0.0
    _, q2_in, q3_in = fld.pieces(z_in)
    assert np.max(np.abs(q2_in)) > 0.0
    assert np.max(np.abs(q3_in)) == 0.0
    _, _, q3_ann = fld.pieces(z_ann)
    assert np.max(np.abs(q3_ann)) > 0.0


def test_residual_annulus_bound(saw, saw_cs):
    # one constant serves the whole viscosity ladder
    C = 4e4
    for eps in LADDER:
        ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
        fld = ap.residual_field(0.1)
        egam = eps ** GAMMA
        zs = eps * fld.delta_eff + np.concatenate(
            [np.linspace(1.0, 2.0, 200), np.linspace(-2.0, -1.0, 200)]) * egam
        assert np.max(np.abs(fld.value(zs, check=False))) \
            <= C * eps ** (2.0 * GAMMA)


def test_residual_z_derivatives_fd(saw, saw_cs):
    rng = np.random.default_rng(3)
    eps = 2.0 ** -8
    ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
    fld = ap.residual_field(0.1)
    egam = eps ** GAMMA
    # tight check away from the cutoff plateau edges, where the
    # mollifier's high derivatives spike beyond what central
    # differences can resolve at any usable step
    y = np.concatenate([rng.uniform(-0.85, 0.85, 40),
                        rng.uniform(1.15, 1.85, 15),
                        rng.uniform(-1.85, -1.15, 15)])
    zs = np.concatenate([eps * fld.delta_eff + y * egam,
                         rng.uniform(0.1, 0.85, 15),
                         rng.uniform(-0.85, -0.1, 15)])
    h = eps / 160.0
    dz = fld.dz(zs)
    rel = np.max(np.abs(dz - fd4(lambda z: fld.value(z, check=False),
                                 zs, h))) / np.max(np.abs(dz))
    assert rel <= 1e-5
    dzz = fld.dzz(zs)
    rel2 = np.max(np.abs(dzz - fd4(fld.dz, zs, h))) / np.max(np.abs(dzz))
    assert rel2 <= 1e-5
    # edge regions included, coarse agreement only
    z_all = eps * fld.delta_eff + np.linspace(-2.2, 2.2, 221) * egam
    dz_all = fld.dz(z_all)
    rel_all = np.max(np.abs(dz_all - fd4(
        lambda z: fld.value(z, check=False), z_all, h))) \
        / np.max(np.abs(dz_all))
    assert rel_all <= 1e-2


def test_residual_time_samplers_vanish(saw7, saw7_cs):
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, 2.0 ** -8)
    fld = ap.residual_field(0.3)
    zs = np.linspace(-1.0, 1.0, 101)
    assert np.all(fld.dt(zs) == 0.0)
    assert np.all(fld.dzt(zs) == 0.0)
    assert np.all(fld.dtt(zs) == 0.0)


def test_gauge_invariance(saw, saw_cs):
    eps, t = 2.0 ** -8, 0.1
    base = rwk.assemble_approx_solution(saw, saw_cs, eps)
    moved = rwk.assemble_approx_solution(saw, saw_cs, eps,
                                         profile_phase=0.4,
                                         delta0_offset=-0.4)
    xs = np.linspace(-1.0, 1.0, 501)
    assert np.max(np.abs(base.u_app(xs, t) - moved.u_app(xs, t))) <= 1e-12
    g = _norm_grid(saw.L, eps, GAMMA)
    l1 = [float(np.trapezoid(np.abs(a.residual_field(t).value(g)), g))
          for a in (base, moved)]
    assert abs(l1[1] - l1[0]) <= 0.10 * l1[0]


def test_residual_frame_equivalence(saw7, saw7_cs):
    rng = np.random.default_rng(5)
    eps, t = 2.0 ** -6, 0.3
    ap = rwk.assemble_approx_solution(saw7, saw7_cs, eps)
    fld = ap.residual_field(t)
    zs = rng.uniform(-1.0, 1.0, 200)
    ref = fld.value(zs, check=False)
    for shift in (0.0, 3.0 * saw7.L):
        xv = ap.phi.value(zs + shift, t)
        assert np.max(np.abs(ref - fld.value_at_x(xv))) <= 1e-10


def test_matching_gap_bound(saw, saw_cs):
    for eps in (2.0 ** -6, 2.0 ** -8, 2.0 ** -10):
        ap = rwk.assemble_approx_solution(saw, saw_cs, eps)
        alpha = saw.L / 2.0
        bound = eps ** (3.0 * GAMMA) + np.exp(-alpha * eps ** (GAMMA - 1.0))
        assert ap.matching_gap(0.1) <= 50.0 * bound


# ---------------------------------------------------------------------------
# scaling certification

def test_certify_scaling_ladder_passes(saw12, saw12_cs, tmp_path):
    csv_path = tmp_path / "scaling.csv"
    json_path = tmp_path / "scaling.json"
    report = certify_scaling(saw12, saw12_cs, LADDER, GAMMA,
                             csv_path=str(csv_path),
                             json_path=str(json_path))
    assert report['pass'] is True
    for v in report['verdicts']:
        assert v['pass'] is True
        if v['required'] is not None:
            assert v['slope'] >= v['required'] - 0.15
    assert report['band']['ratio'] <= 3.0

    lines = csv_path.read_text().strip().split("\n")
    assert lines[0] == "eps,norm_name,value"
    assert len(lines) == 1 + len(LADDER) * 12
    eps_col, name_col, val_col = lines[1].split(",")
    assert float(eps_col) == LADDER[0]
    assert name_col in report['norms']
    assert float(val_col) == report['norms'][name_col][0]

    stored = json.loads(json_path.read_text())
    assert stored['verdicts'] == report['verdicts']
    assert stored['norms'] == report['norms']

    # reruns are deterministic down to the bytes
    second = tmp_path / "again.csv"
    certify_scaling(saw12, saw12_cs, LADDER, GAMMA, csv_path=str(second))
    assert second.read_bytes() == csv_path.read_bytes()


def test_certify_ladder_validation(saw12, saw12_cs):
    with pytest.raises(ConfigError):
        certify_scaling(saw12, saw12_cs, LADDER[:4], GAMMA)
    with pytest.raises(ConfigError):
        certify_scaling(saw12, saw12_cs,
                        [0.1, 0.05, 0.03, 0.01, 0.005], GAMMA)
    with pytest.raises(ConfigError):
        certify_scaling(saw12, saw12_cs, LADDER[::-1], GAMMA)


def test_certify_detects_slow_decay(saw, saw_cs, tmp_path):
    # short wavelength: the layer tails overlap the matching annuli and
    # spoil the sup-norm decay, which the certification must flag
    csv_path = tmp_path / "bad.csv"
    json_path = tmp_path / "bad.json"
    with pytest.raises(ScalingViolation):
        certify_scaling(saw, saw_cs, LADDER, GAMMA,
                        csv_path=str(csv_path), json_path=str(json_path))
    assert csv_path.exists()
    stored = json.loads(json_path.read_text())
    assert stored['pass'] is False
