"""Composite inner-outer approximation and residual certification.

Glues the periodic entropy solution, the between-shock correctors and the
viscous layer expansions into one smooth field: within eps^gamma of each
shock the field is the layer expansion, beyond 2 eps^gamma it is the slow
outer expansion, and a mollified cutoff bridges the annulus in between.
The defect of that field under the viscous balance law is then measured
in the shock-fitting frame and its decay in epsilon is certified against
required rates.

The residual is computed along two independent groupings: (a) the balance
law applied directly to the composite field and (b) the sum of the outer,
layer and commutator pieces that the matching argument produces.  The two
coincide identically in exact arithmetic once the layer hierarchy closes
at second order, so both are evaluated in extended precision and compared;
disagreement beyond relative 1e-6 signals a formula error, not noise.

Residual machinery is restricted to rigid scalar waves (one shock per
period, vanishing between-shock corrector, constant shift, affine outer
profile): exactly the regime where the fourth-order derivative chains of
the layer hierarchy exist in closed form.  Composite evaluation itself
works for any wave the corrector solver accepts.
"""

import json
import math

import numpy as np

from .corrector import CorrectorSet
from .cutoff import CutoffConfig, smooth_step
from .errors import ConfigError, Disagreement, NotMonotone, ScalingViolation
from .rollwave import RollWave

_LD = np.longdouble
_trapz = getattr(np, 'trapezoid', np.trapz)


def _wrap_centered(d, L):
    # representative in [-L/2, L/2]; the seam sits half a period from the shock
    return d - L * np.round(d / L)


def _state_vec(profile, xi):
    """Profile state with the component axis kept even for scalars."""
    out = np.asarray(profile.state(xi), dtype=float)
    if profile.system.n == 1 and out.ndim == np.asarray(xi, dtype=float).ndim:
        out = out[..., None]
    return out


# ---------------------------------------------------------------------------
# stretched coordinate

def stretched_xi(rollwave: RollWave, j: int, x, t: float, epsilon: float,
                 delta0: float = 0.0, delta1: float = 0.0):
    """Layer coordinate of shock j: (x - X_j(t)) / eps + delta0 + eps * delta1.

    Affine in x and never wrapped; periodic bookkeeping belongs to the
    composite evaluators, not to the coordinate itself.
    """
    x = np.asarray(x, dtype=float)
    return (x - rollwave.shock_position(j, t)) / epsilon \
        + delta0 + epsilon * delta1


# ---------------------------------------------------------------------------
# shock-fitting frame map

class _PlateauPartition:
    """Periodic partition of unity with exact plateaus at given centers.

    alpha_j equals 1 within distance r of its center and hands off to
    each neighbor through one shared ramp of width r/2 at the midpoint
    between the centers; the symmetric smoothstep makes the weights sum
    to 1 identically.  Neighbors must sit at least 5r/2 apart so the
    ramps clear both plateaus; there is no upper spacing limit.
    """

    def __init__(self, centers, L, r):
        self.centers = np.sort(np.asarray(centers, dtype=float))
        self.L = float(L)
        self.r = float(r)
        self.w = 0.5 * self.r
        if self.centers.size < 2:
            raise ConfigError("partition needs at least two centers")
        gaps = np.diff(np.append(self.centers, self.centers[0] + self.L))
        if gaps.min() < 2.5 * self.r - 1e-12:
            raise ConfigError(
                f"centers {gaps.min():.3g} apart need plateau radius "
                f"<= {gaps.min() / 2.5:.3g}, got {self.r:.3g}")
        self.gaps = gaps

    def _ramp_args(self, z):
        z = np.asarray(z, dtype=float)
        zeta = _wrap_centered(z[..., None] - self.centers, self.L)
        w = self.w
        sR = (self.gaps / 2.0 + w / 2.0 - zeta) / w
        sL = (zeta + np.roll(self.gaps, 1) / 2.0 + w / 2.0) / w
        return sR, sL

    def alpha(self, z):
        """Weights and their first two z-derivatives, shape (..., m)."""
        sR, sL = self._ramp_args(z)
        w = self.w
        R0, L0 = smooth_step(sR), smooth_step(sL)
        R1 = smooth_step(sR, 1) * (-1.0 / w)
        L1 = smooth_step(sL, 1) / w
        R2 = smooth_step(sR, 2) / w ** 2
        L2 = smooth_step(sL, 2) / w ** 2
        a0 = R0 * L0
        a1 = R1 * L0 + R0 * L1
        a2 = R2 * L0 + 2.0 * R1 * L1 + R0 * L2
        return a0, a1, a2


class PhiMap:
    """Shock-fitting reparametrization phi(z, t) of the spatial period.

    Near the home position of shock j the map is the rigid translation
    taking z to the shifted shock location; the translations are blended
    through a plateau partition of unity.  One shock per period forces
    the weight to 1 everywhere, making phi a global translation.
    """

    def __init__(self, rollwave, delta, delta_rate, epsilon, partition):
        self.rollwave = rollwave
        self.epsilon = float(epsilon)
        self.delta = delta
        self.delta_rate = delta_rate
        self.partition = partition
        m = rollwave.m
        self.zhome = np.arange(m) * rollwave.L / m
        self.min_dz_observed = None

    def _shifts(self, t):
        rw = self.rollwave
        X = np.array([rw.shock_position(j + 1, t) for j in range(rw.m)])
        return X - self.zhome - self.epsilon * self.delta(t)

    def value(self, z, t):
        z = np.asarray(z, dtype=float)
        sh = self._shifts(t)
        if self.partition is None:
            return z + sh[0]
        a0, _, _ = self.partition.alpha(z)
        return z + a0 @ sh

    def dz(self, z, t):
        z = np.asarray(z, dtype=float)
        if self.partition is None:
            return np.ones_like(z)
        _, a1, _ = self.partition.alpha(z)
        return 1.0 + a1 @ self._shifts(t)

    def dzz(self, z, t):
        z = np.asarray(z, dtype=float)
        if self.partition is None:
            return np.zeros_like(z)
        _, _, a2 = self.partition.alpha(z)
        return a2 @ self._shifts(t)

    def dt(self, z, t):
        z = np.asarray(z, dtype=float)
        rate = self.rollwave.speed - self.epsilon * self.delta_rate(t)
        if self.partition is None:
            return np.full_like(z, float(rate[0]))
        a0, _, _ = self.partition.alpha(z)
        return a0 @ rate

    def alpha(self, z):
        z = np.asarray(z, dtype=float)
        if self.partition is None:
            return np.ones(z.shape + (1,))
        return self.partition.alpha(z)[0]


def build_phi(rollwave: RollWave, delta, epsilon: float, r=None, *,
              delta_rate=None, grid: int = 4001) -> PhiMap:
    """Construct and vet the shock-fitting frame map.

    delta gives per-shock layer shifts, as a callable of t or constants.
    The map must stay strictly increasing in z, checked on a fine grid at
    several times; a degenerate map raises NotMonotone.
    """
    m = rollwave.m

    if callable(delta):
        base = delta
    else:
        const = np.broadcast_to(np.asarray(delta, dtype=float), (m,)).copy()
        base = lambda t: const

    def dvec(t):
        out = np.atleast_1d(np.asarray(base(t), dtype=float))
        if out.shape != (m,):
            out = np.broadcast_to(out, (m,)).copy()
        return out

    if delta_rate is None:
        h = 1e-6 * max(1.0, rollwave.T_star)
        rfun = lambda t: (dvec(t + h) - dvec(t - h)) / (2.0 * h)
    elif callable(delta_rate):
        rfun = lambda t: np.broadcast_to(
            np.asarray(delta_rate(t), dtype=float), (m,)).copy()
    else:
        rconst = np.broadcast_to(np.asarray(delta_rate, dtype=float),
                                 (m,)).copy()
        rfun = lambda t: rconst

    partition = None
    if m >= 2:
        if r is None:
            r = 0.36 * rollwave.L / m
        partition = _PlateauPartition(np.arange(m) * rollwave.L / m,
                                      rollwave.L, r)

    pm = PhiMap(rollwave, dvec, rfun, epsilon, partition)

    zs = np.linspace(0.0, rollwave.L, grid)
    worst = math.inf
    for tt in np.linspace(0.0, rollwave.T_star, 5):
        worst = min(worst, float(np.min(pm.dz(zs, tt))))
    if worst <= 0.0:
        raise NotMonotone(f"frame map loses monotonicity: min phi_z "
                          f"{worst:.3e}")
    pm.min_dz_observed = worst
    return pm


# ---------------------------------------------------------------------------
# composite approximation

class ApproxSolution:
    """Matched composite of layer expansions and the between-shock field.

    Within eps^gamma of a shock the field equals the layer expansion,
    beyond 2 eps^gamma the outer expansion; the plateaus of the cutoff
    make both equalities bitwise exact.  profile_phase and delta0_offset
    reparametrize the layer; shifting the phase by a while offsetting the
    shift by -a leaves the field unchanged.
    """

    def __init__(self, rollwave, correctors, epsilon, gamma, cutoff, phi,
                 profile_phase, delta0_offset):
        self.rollwave = rollwave
        self.correctors = correctors
        self.epsilon = float(epsilon)
        self.gamma = float(gamma)
        self.cutoff = cutoff
        self.phi = phi
        self.profile_phase = float(profile_phase)
        self.delta0_offset = float(delta0_offset)
        self.order = correctors.order
        self._scache = {}
        self._gate = None

    # -- layer bookkeeping --------------------------------------------------

    def delta_shift(self, t, j: int = 1):
        """Shift pair (delta0, delta1) of shock j, offset included."""
        cs = self.correctors
        d0 = float(cs.delta0(t, j)) + self.delta0_offset
        d1 = float(cs.delta1(t, j)) if self.order == 2 else 0.0
        return d0, d1

    def _samplers(self, j, t):
        key = (j, round(float(t), 12))
        if key not in self._scache:
            cs = self.correctors
            V2 = cs.V2(j, t) if self.order == 2 else None
            self._scache[key] = (cs.profiles[j], cs.V1(j, t), V2)
        return self._scache[key]

    def _layer_jet(self, j, zeta, t, k):
        """k-th stretched derivative of the layer sum V + eps V1 + eps^2 V2."""
        prof, V1, V2 = self._samplers(j, t)
        eps = self.epsilon
        if k == 0:
            base = _state_vec(prof, zeta)
        else:
            if k == 1:
                base = prof.state_xi(zeta)
            elif k == 2:
                base = prof.state_xixi(zeta)
            elif k == 3:
                base = prof.state_xi3(zeta)
            else:
                # closed-form fourth derivative; rigid scalar tier only
                v1 = np.asarray(prof.state_xi(zeta), dtype=float)
                v2 = np.asarray(prof.state_xixi(zeta), dtype=float)
                v3 = np.asarray(prof.state_xi3(zeta), dtype=float)
                A = np.asarray(self.rollwave.system.flux_jacobian(
                    _state_vec(prof, zeta)), dtype=float)[..., 0, 0] \
                    - self.rollwave.speed
                base = 3.0 * self._b2 * v2 * v1 + A * v3
            base = np.asarray(base, dtype=float)
            if self.rollwave.system.n == 1 \
                    and base.ndim == np.asarray(zeta, dtype=float).ndim:
                base = base[..., None]
        out = base + eps * getattr(V1, 'val' if k == 0 else f'd{k}')(zeta)
        if V2 is not None:
            out = out + eps * eps * getattr(V2, 'val' if k == 0
                                            else f'd{k}')(zeta)
        return out

    # -- fields -------------------------------------------------------------

    def inner(self, j: int, x, t: float):
        """Layer expansion of shock j at the unwrapped stretched coordinate."""
        x = np.asarray(x, dtype=float)
        return self._inner_from_offset(
            j, x - self.rollwave.shock_position(j, t), t)

    def _inner_from_offset(self, j: int, dx, t: float):
        # dx is x - X_j(t), already centered by the caller when periodic
        # bookkeeping applies
        d0, d1 = self.delta_shift(t, j)
        zeta = np.asarray(dx, dtype=float) / self.epsilon \
            + d0 + self.epsilon * d1 + self.profile_phase
        return self._layer_jet(j, zeta, t, 0)

    def outer(self, x, t: float):
        """Slow expansion between the shocks."""
        cs = self.correctors
        eps = self.epsilon
        out = self.rollwave.field(x, t) + eps * cs.u1(x, t)
        u2 = getattr(cs, 'u2', None)
        if u2 is not None:
            out = out + eps * eps * u2(x, t)
        return out

    def u_app(self, x, t: float):
        """Composite field; plateau equalities with inner/outer are exact."""
        x = np.asarray(x, dtype=float)
        shape = x.shape
        xf = x.reshape(-1)
        out = np.array(self.outer(xf, t), copy=True)
        egam = self.epsilon ** self.gamma
        for j in range(1, self.rollwave.m + 1):
            dx = _wrap_centered(xf - self.rollwave.shock_position(j, t),
                                self.rollwave.L)
            w = self.cutoff.mu(dx / egam)
            act = w > 0.0
            if not np.any(act):
                continue
            I = self._inner_from_offset(j, dx[act], t)
            wc = w[act][:, None]
            out[act] = np.where(wc == 1.0, I, wc * I + (1.0 - wc) * out[act])
        return out.reshape(shape + (self.rollwave.system.n,))

    def u_app_z_frame(self, z, t: float):
        """Composite field carried to the shock-fitting frame."""
        return self.u_app(self.phi.value(z, t), t)

    def u_app_x(self, x, t: float, order: int = 1):
        """Spatial derivative of the composite field, order 1 through 4.

        Orders beyond the first need the rigid scalar tier (closed-form
        layer chains); order 1 works for every assembled wave.
        """
        if order not in (1, 2, 3, 4):
            raise ConfigError("derivative order must be 1..4")
        if order > 1:
            self._require_rigid()
        x = np.asarray(x, dtype=float)
        shape = x.shape
        xf = x.reshape(-1)
        rw = self.rollwave
        cs = self.correctors
        eps = self.epsilon
        egam = eps ** self.gamma

        def ojet(xa, k):
            if k == 0:
                return self.outer(xa, t)
            if k == 1:
                return rw.field_x(xa, t) + eps * cs.u1(xa, t, deriv=1)
            # rigid tier: the outer field is affine, so k >= 2 vanishes
            return np.zeros((np.asarray(xa).size, rw.system.n))

        out = np.array(ojet(xf, order), copy=True)
        for j in range(1, rw.m + 1):
            dx = _wrap_centered(xf - rw.shock_position(j, t), rw.L)
            wch = CutoffConfig.mu_chain(dx / egam)
            act = wch[0] > 0.0
            if not np.any(act):
                continue
            xa = xf[act]
            d0, d1 = self.delta_shift(t, j)
            zeta = dx[act] / eps + d0 + eps * d1 + self.profile_phase

            def ijet(k):
                return self._layer_jet(j, zeta, t, k) / eps ** k

            total = np.array(ojet(xa, order), copy=True)
            for i in range(order + 1):
                G = ijet(order - i) - ojet(xa, order - i)
                total += (math.comb(order, i) * wch[i][act]
                          / egam ** i)[:, None] * G
            inm = wch[0][act] == 1.0
            outm = wch[0][act] == 0.0
            if np.any(inm):
                total[inm] = ijet(order)[inm]
            if np.any(outm):
                total[outm] = np.asarray(ojet(xa, order))[outm]
            out[act] = total
        return out.reshape(shape + (rw.system.n,))

    def u_app_t(self, x, t: float):
        """Time derivative of the composite field (rigid scalar tier).

        A rigid wave translates, so d/dt = -speed * d/dx up to the layer
        shift drift, which the tier gate bounds at solver noise.
        """
        self._require_rigid()
        return -self.rollwave.speed * self.u_app_x(x, t, 1)

    # -- diagnostics --------------------------------------------------------

    def matching_gap(self, t: float, num: int = 160) -> float:
        """Sup of |inner - outer| over the matching annuli at time t."""
        egam = self.epsilon ** self.gamma
        worst = 0.0
        for j in range(1, self.rollwave.m + 1):
            Xj = self.rollwave.shock_position(j, t)
            for sgn in (-1.0, 1.0):
                xs = Xj + sgn * np.linspace(egam, 2.0 * egam, num)
                gap = np.abs(self.inner(j, xs, t) - self.outer(xs, t))
                worst = max(worst, float(gap.max()))
        return worst

    # -- rigid scalar tier --------------------------------------------------

    def _vet_rigid(self):
        cs = self.correctors
        rw = self.rollwave
        sysm = rw.system
        if sysm.n != 1:
            return ("residual chains are closed only for scalar waves; "
                    f"this system has n = {sysm.n}")
        if rw.m != 1:
            return "residual chains cover a single shock per period"
        if cs.order != 2:
            return "residual chains need second-order layer data"
        if np.max(np.abs(np.asarray(cs._w_snaps))) > 0.0:
            return "between-shock corrector must vanish identically"
        drift = max(float(np.max(np.abs(cs._delta0))),
                    float(np.max(np.abs(cs._delta0t))))
        if drift > 1e-8:
            return f"layer shift must be rigid; saw drift {drift:.3e}"
        if abs(cs._order2['d1t0']) > 1e-8:
            return "second-order shift must be rigid"
        zs = np.linspace(0.0, rw.L, 37)[1:-1]
        d2 = float(np.max(np.abs(rw.frame_d2state(zs))))
        if d2 > 1e-13:
            return f"outer profile must be affine; curvature {d2:.3e}"
        d1 = np.asarray(rw.frame_dstate(zs), dtype=float)[..., 0]
        if float(np.ptp(d1)) > 1e-13:
            return "outer slope must be constant"
        prof = cs.profiles[1]
        span = np.linspace(-prof.Xi, prof.Xi, 9)
        H = np.asarray(sysm.flux_hess(_state_vec(prof, span)), dtype=float)
        if float(np.ptp(H)) > 1e-10 * (1.0 + float(np.max(np.abs(H)))):
            return "flux must be quadratic on the layer range"
        S = np.asarray(sysm.source_hess(_state_vec(prof, span)), dtype=float)
        if float(np.max(np.abs(S))) > 1e-10:
            return "source must be affine on the layer range"
        dg = np.asarray(sysm.source_jacobian(_state_vec(prof, span)),
                        dtype=float)
        if float(np.ptp(dg)) > 1e-12:
            return "source slope must be constant"
        self._b2 = float(H.reshape(-1)[0])
        self._c1 = float(dg.reshape(-1)[0])
        self._O1 = float(d1.reshape(-1)[0])
        return True

    def _require_rigid(self):
        if self._gate is None:
            self._gate = self._vet_rigid()
        if self._gate is not True:
            raise ConfigError(self._gate)

    def residual_field(self, t: float) -> "_RigidResidual":
        """Residual sampler in the stretched frame (rigid scalar tier)."""
        self._require_rigid()
        return _RigidResidual(self, t)

    def residual_q(self, z, t: float, *, check: bool = True):
        """Residual q~(z, t); dual-grouping agreement enforced by default."""
        return self.residual_field(t).value(z, check=check)


def assemble_approx_solution(rollwave: RollWave, correctors: CorrectorSet,
                             epsilon: float, gamma: float = 0.75, *,
                             r=None, profile_phase: float = 0.0,
                             delta0_offset: float = 0.0) -> ApproxSolution:
    """Build the composite approximation for one viscosity value.

    The cutoff scale is eps^gamma with 2/3 < gamma < 1; both cutoff zones
    must fit well inside one cell, else ConfigError.
    """
    if correctors.rollwave is not rollwave:
        raise ConfigError("corrector set belongs to a different wave")
    if not (0.0 < epsilon < 1.0):
        raise ConfigError(f"epsilon {epsilon:g} outside (0, 1)")
    cutoff = CutoffConfig(gamma=gamma)
    seg = rollwave.L / rollwave.m
    if 2.0 * epsilon ** gamma >= 0.45 * seg:
        raise ConfigError(
            f"cutoff reach {2.0 * epsilon ** gamma:.3g} crowds the cell "
            f"of width {seg:.3g}; decrease epsilon or increase gamma")

    order2 = correctors.order == 2

    def delta(t):
        out = np.empty(rollwave.m)
        for j in range(1, rollwave.m + 1):
            d0 = float(correctors.delta0(t, j)) + delta0_offset
            d1 = float(correctors.delta1(t, j)) if order2 else 0.0
            out[j - 1] = d0 + epsilon * d1
        return out

    phi = build_phi(rollwave, delta, epsilon, r)
    return ApproxSolution(rollwave, correctors, epsilon, gamma, cutoff, phi,
                          profile_phase, delta0_offset)


def evaluate_u_app(approx: ApproxSolution, x, t: float):
    """Composite field value; thin alias for ApproxSolution.u_app."""
    return approx.u_app(x, t)


def evaluate_u_app_z_frame(approx: ApproxSolution, z, t: float):
    """Frame-composed composite field; alias for u_app_z_frame."""
    return approx.u_app_z_frame(z, t)


def residual_q(approx: ApproxSolution, z, t: float, *, check: bool = True):
    """Stretched-frame residual; thin alias for ApproxSolution.residual_q."""
    return approx.residual_q(z, t, check=check)


# ---------------------------------------------------------------------------
# residual engine (rigid scalar tier)

class _RigidResidual:
    """Residual of the composite field in the stretched frame.

    All assembly arithmetic runs in extended precision on top of the
    float64 sampler values, and the profile jet is rebuilt through its
    own equation so the leading 1/eps cancellations are exact in the
    shared jet values.  The wave is rigid, so the field is a pure
    translate and the time-derivative samplers vanish identically.
    """

    def __init__(self, approx: ApproxSolution, t: float):
        self.approx = approx
        self.t = float(t)
        ap = approx
        rw = ap.rollwave
        cs = ap.correctors
        self.epsilon = ap.epsilon
        self.gamma = ap.gamma
        self.L = rw.L
        self.X = float(rw.shock_position(1, t))
        d0, d1 = ap.delta_shift(t, 1)
        self.delta_eff = d0 + ap.epsilon * d1
        self.phase = ap.profile_phase
        self.prof, self.V1, self.V2 = ap._samplers(1, t)
        self._sys = rw.system
        self.b2 = _LD(ap._b2)
        self.c1 = _LD(ap._c1)
        self.O1c = _LD(ap._O1)
        self.s = _LD(rw.speed)
        # the layer problems fold the shift rates into their forcings, so
        # the regrouped layer residual must carry them back out; on a
        # rigid wave they sit at solver-noise level
        self.d0rate = _LD(float(cs.delta0t(t, 1)))
        self.d1rate = _LD(cs._order2['d1t0'])
        um = np.asarray(rw.trace(1, '-', 0, t), dtype=float).reshape(-1)[0]
        self.q0 = self._F(_LD(um)) - self.s * _LD(um)

    # scalar wrappers over the vector system callables; polynomial fluxes
    # preserve the extended dtype
    def _F(self, u):
        return np.asarray(self._sys.flux(np.asarray(u)[..., None]))[..., 0]

    def _dF(self, u):
        return np.asarray(
            self._sys.flux_jacobian(np.asarray(u)[..., None]))[..., 0, 0]

    def _G(self, u):
        return np.asarray(self._sys.source(np.asarray(u)[..., None]))[..., 0]

    def _jets_from_offset(self, zzw):
        """Jets of every building block at the frame offset zzw from the
        shock home (already wrapped into one period)."""
        ap = self.approx
        eps = self.epsilon
        epsL = _LD(eps)
        zeta = zzw / eps + self.phase
        dx = zzw - eps * self.delta_eff
        y = dx / eps ** self.gamma
        wch = CutoffConfig.mu_chain(y).astype(_LD)

        V0 = _LD(1) * np.asarray(self.prof.state(zeta), dtype=float)
        A0 = self._dF(V0) - self.s
        Vd = [V0, self._F(V0) - self.s * V0 - self.q0]
        Vd.append(A0 * Vd[1])
        Vd.append(self.b2 * Vd[1] ** 2 + A0 * Vd[2])
        Vd.append(3.0 * self.b2 * Vd[2] * Vd[1] + A0 * Vd[3])

        W1 = [np.asarray(getattr(self.V1, a)(zeta), dtype=float)[..., 0]
              .astype(_LD) for a in ('val', 'd1', 'd2', 'd3', 'd4')]
        W2 = [np.asarray(getattr(self.V2, a)(zeta), dtype=float)[..., 0]
              .astype(_LD) for a in ('val', 'd1', 'd2', 'd3', 'd4')]

        I = [(Vd[k] + epsL * W1[k] + epsL ** 2 * W2[k]) / epsL ** k
             for k in range(5)]

        O0 = np.asarray(ap.rollwave.frame_state(np.mod(dx, self.L)),
                        dtype=float)[..., 0].astype(_LD)
        O = [O0, self.O1c * np.ones_like(O0), np.zeros_like(O0),
             np.zeros_like(O0), np.zeros_like(O0)]

        G = [I[k] - O[k] for k in range(5)]
        egamL = epsL ** _LD(self.gamma)
        mu = [wch[k] / egamL ** k for k in range(5)]
        inm = wch[0] == 1.0
        outm = wch[0] == 0.0
        U = []
        for k in range(5):
            acc = O[k].copy()
            for i in range(k + 1):
                acc = acc + math.comb(k, i) * mu[i] * G[k - i]
            acc[inm] = I[k][inm]
            acc[outm] = O[k][outm]
            U.append(acc)
        return {'V': Vd, 'W1': W1, 'W2': W2, 'I': I, 'O': O, 'G': G,
                'U': U, 'mu': mu, 'w0': wch[0]}

    def _jets(self, z):
        z = np.asarray(z, dtype=float)
        return self._jets_from_offset(_wrap_centered(z, self.L))

    # -- route (a): the balance law applied to the composite ----------------

    def _route_a(self, J, upto: int = 0):
        eps = _LD(self.epsilon)
        U = J['U']
        A0 = self._dF(U[0]) - self.s
        q = A0 * U[1] - eps * U[2] - self._G(U[0])
        if upto == 0:
            return (q,)
        qz = self.b2 * U[1] ** 2 + A0 * U[2] - eps * U[3] - self.c1 * U[1]
        if upto == 1:
            return q, qz
        qzz = (3.0 * self.b2 * U[1] * U[2] + A0 * U[3] - eps * U[4]
               - self.c1 * U[2])
        return q, qz, qzz

    # -- route (b): outer + layer + commutator grouping ---------------------

    def _route_b(self, J):
        eps = _LD(self.epsilon)
        V, W1, W2 = J['V'], J['W1'], J['W2']
        I, O, G, mu, w0 = J['I'], J['O'], J['G'], J['mu'], J['w0']

        # outer piece: with the corrector cascade identically zero the
        # flux and source Taylor remainders collapse term by term
        q1 = np.zeros_like(V[0])

        # layer piece: flux and source expanded about the profile minus
        # everything the hierarchy balanced, plus the shift-rate carryover
        dfV = self._dF(V[0])
        dfI = self._dF(I[0])
        Ixi = V[1] + eps * W1[1] + eps ** 2 * W2[1]
        P_xi = (dfI * Ixi - dfV * V[1]
                - eps * (self.b2 * V[1] * W1[0] + dfV * W1[1])
                - eps ** 2 * (self.b2 * V[1] * W2[0] + dfV * W2[1])
                - eps ** 2 * self.b2 * W1[0] * W1[1])
        Gg = self._G(I[0]) - self._G(V[0]) - eps * self.c1 * W1[0]
        rate = self.d0rate + eps * self.d1rate
        q2 = w0 * (P_xi / eps - Gg - rate * V[1])

        # commutator piece: everything carrying a cutoff derivative plus
        # the convexity defect of blending through the flux and source
        mu_x, mu_xx = mu[1], mu[2]
        mu_t = -self.s * mu_x
        fI, fO = self._F(I[0]), self._F(O[0])
        fU_x = self._dF(J['U'][0]) * J['U'][1]
        mix_x = (mu_x * fI + w0 * dfI * I[1]
                 - mu_x * fO + (1.0 - w0) * self._dF(O[0]) * O[1])
        gmix = self._G(J['U'][0]) - (w0 * self._G(I[0])
                                     + (1.0 - w0) * self._G(O[0]))
        q3 = (mu_t * G[0] - eps * mu_xx * G[0] - 2.0 * eps * mu_x * G[1]
              + mu_x * (fI - fO) + (fU_x - mix_x) - gmix)
        return q1, q2, q3

    # -- public samplers ----------------------------------------------------

    def _check_routes(self, J):
        qa = self._route_a(J)[0]
        qb = sum(self._route_b(J))
        scale = max(float(np.max(np.abs(qa))), float(np.max(np.abs(qb))))
        gap = float(np.max(np.abs(qa - qb)))
        # both groupings cancel through terms of size M; below the
        # extended-precision roundoff of that cancellation equality is
        # not decidable, so the relative test gets an absolute allowance
        eps = _LD(self.epsilon)
        U = J['U']
        A0 = self._dF(U[0]) - self.s
        M = float(np.max(np.abs(A0 * U[1]) + eps * np.abs(U[2])
                         + np.abs(self._G(U[0]))))
        floor = 64.0 * float(np.finfo(_LD).eps) * M
        if scale > 0.0 and gap > max(1e-6 * scale, floor):
            raise Disagreement(
                f"residual groupings disagree: gap {gap:.3e} vs scale "
                f"{scale:.3e} (relative {gap / scale:.3e})")
        return qa

    def value(self, z, check: bool = True):
        J = self._jets(z)
        if check:
            return np.asarray(self._check_routes(J), dtype=float)
        return np.asarray(self._route_a(J)[0], dtype=float)

    def value_at_x(self, x, check: bool = False):
        """Same residual addressed by the lab coordinate."""
        x = np.asarray(x, dtype=float)
        dx = _wrap_centered(x - self.X, self.L)
        J = self._jets_from_offset(dx + self.epsilon * self.delta_eff)
        if check:
            return np.asarray(self._check_routes(J), dtype=float)
        return np.asarray(self._route_a(J)[0], dtype=float)

    def pieces(self, z):
        """The three grouped pieces, for support checks."""
        q1, q2, q3 = self._route_b(self._jets(z))
        return (np.asarray(q1, dtype=float), np.asarray(q2, dtype=float),
                np.asarray(q3, dtype=float))

    def routes(self, z):
        """Both groupings, unchecked."""
        J = self._jets(z)
        qa = self._route_a(J)[0]
        qb = sum(self._route_b(J))
        return np.asarray(qa, dtype=float), np.asarray(qb, dtype=float)

    def dz(self, z):
        J = self._jets(z)
        return np.asarray(self._route_a(J, upto=1)[1], dtype=float)

    def dzz(self, z):
        J = self._jets(z)
        return np.asarray(self._route_a(J, upto=2)[2], dtype=float)

    def dt(self, z):
        return np.zeros(np.shape(np.asarray(z, dtype=float)))

    dzt = dt
    dtt = dt

    def norm_table(self, grid):
        """Sup and L1 norms of the residual and its derivatives on a grid."""
        grid = np.asarray(grid, dtype=float)
        fields = {'q': self.value(grid), 'q_z': self.dz(grid),
                  'q_zz': self.dzz(grid), 'q_t': self.dt(grid),
                  'q_zt': self.dzt(grid), 'q_tt': self.dtt(grid)}
        out = {}
        for name, v in fields.items():
            av = np.abs(np.asarray(v, dtype=float))
            out[name + '.Linf'] = float(av.max())
            out[name + '.L1'] = float(_trapz(av, grid))
        return out


# ---------------------------------------------------------------------------
# scaling certification

_NORM_NAMES = tuple(f"{fam}.{nrm}" for fam in
                    ('q', 'q_z', 'q_zz', 'q_t', 'q_zt', 'q_tt')
                    for nrm in ('Linf', 'L1'))


def _norm_grid(L, epsilon, gamma):
    coarse = np.linspace(-L / 2.0, L / 2.0, 801)
    half = 3.0 * epsilon ** gamma
    fine = np.arange(-half, half + epsilon / 24.0, epsilon / 12.0)
    return np.unique(np.concatenate([coarse, fine]))


def _decay_rate(eps_list, vals):
    vals = np.asarray(vals, dtype=float)
    if float(vals.max()) <= 1e-250:
        # an identically vanishing family decays faster than any power
        return math.inf
    xs = np.log(1.0 / np.asarray(eps_list, dtype=float))
    ys = np.log(np.maximum(vals, 1e-300))
    return float(-np.polyfit(xs, ys, 1)[0])


def _slope_requirements(gamma):
    # sup norms of the residual and its time derivatives decay at twice
    # the cutoff exponent and their L1 norms at three times it; each
    # z-derivative costs one factor; the second z-derivative is only
    # bounded in sup but integrable at the cutoff exponent
    return {'q.Linf': 2.0 * gamma, 'q.L1': 3.0 * gamma,
            'q_t.Linf': 2.0 * gamma, 'q_t.L1': 3.0 * gamma,
            'q_tt.Linf': 2.0 * gamma, 'q_tt.L1': 3.0 * gamma,
            'q_z.Linf': gamma, 'q_z.L1': 2.0 * gamma,
            'q_zt.Linf': gamma, 'q_zt.L1': 2.0 * gamma,
            'q_zz.L1': gamma}


def certify_scaling(rollwave: RollWave, correctors: CorrectorSet, eps_list,
                    gamma: float = 0.75, *, t=None, csv_path=None,
                    json_path=None, margin: float = 0.15,
                    band_factor: float = 3.0) -> dict:
    """Measure residual norms over a viscosity ladder and certify decay.

    The ladder needs at least five strictly decreasing values in fixed
    geometric ratio.  Decay rates of each norm family are fitted in
    log-log and compared against the required slopes minus the margin;
    the sup of the second derivative must stay within band_factor of its
    median over the ladder.  Failures raise ScalingViolation, after any
    requested CSV/JSON artifacts are written.
    """
    eps = np.asarray(list(eps_list), dtype=float)
    if eps.size < 5:
        raise ConfigError("scaling ladder needs at least five values")
    if np.any(eps <= 0.0) or np.any(np.diff(eps) >= 0.0):
        raise ConfigError("scaling ladder must be positive and decreasing")
    ratios = eps[1:] / eps[:-1]
    if float(np.ptp(ratios)) > 1e-9 * float(ratios[0]):
        raise ConfigError("scaling ladder must be geometric")
    if t is None:
        t = 0.25 * rollwave.T_star

    norms = {name: [] for name in _NORM_NAMES}
    for e in eps:
        ap = assemble_approx_solution(rollwave, correctors, float(e), gamma)
        field = ap.residual_field(t)
        table = field.norm_table(_norm_grid(rollwave.L, float(e), gamma))
        for name in _NORM_NAMES:
            norms[name].append(table[name])

    reqs = _slope_requirements(gamma)
    verdicts = []
    failures = []
    for name in _NORM_NAMES:
        rate = _decay_rate(eps, norms[name])
        required = reqs.get(name)
        ok = True
        if required is not None:
            ok = rate >= required - margin
        verdicts.append({'norm': name, 'slope': rate,
                         'required': required, 'pass': bool(ok)})
        if not ok:
            failures.append(f"{name}: slope {rate:.3f} < "
                            f"{required:.3f} - {margin:g}")

    zz = np.asarray(norms['q_zz.Linf'], dtype=float)
    zz_med = max(float(np.median(zz)), 1e-300)
    band_ratio = float(zz.max()) / zz_med
    band_ok = band_ratio <= band_factor
    if not band_ok:
        failures.append(f"q_zz.Linf swings to {band_ratio:.2f} x its "
                        f"median, above {band_factor:g}")

    report = {
        'gamma': float(gamma), 't': float(t), 'margin': float(margin),
        'eps_list': [float(e) for e in eps],
        'norms': {k: [float(v) for v in vs] for k, vs in norms.items()},
        'verdicts': verdicts,
        'band': {'norm': 'q_zz.Linf', 'ratio': band_ratio,
                 'factor': float(band_factor), 'pass': bool(band_ok)},
        'pass': bool(not failures),
    }
    if csv_path is not None:
        _write_scaling_csv(csv_path, eps, norms)
    if json_path is not None:
        _write_scaling_json(json_path, report)
    if failures:
        raise ScalingViolation("; ".join(failures))
    return report


def _write_scaling_csv(path, eps, norms):
    with open(path, 'w') as f:
        f.write("eps,norm_name,value\n")
        for i, e in enumerate(eps):
            for name in _NORM_NAMES:
                f.write(f"{float(e):.17g},{name},{norms[name][i]:.17g}\n")


def _write_scaling_json(path, report):
    with open(path, 'w') as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
