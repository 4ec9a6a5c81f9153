import time
import numpy as np
import rollwaves as rw
from rollwaves.evans import (first_order_system, evans_D, _shoot_determinant,
                             winding_check, _branch_distance,
                             _integration_spans, _endpoint_rates)

burgers = rw.burgers_system()
prof = rw.solve_profile(burgers, [1.0], [-1.0], 0.0)
print("burgers window", prof.xi_lo, prof.xi_hi, "omega", prof.omega_minus,
      prof.omega_plus)
print("spans", _integration_spans(prof, 1e-10))
print("branch dist", _branch_distance(prof))

# endpoint mu oracle: lambda=1, +inf side: a=-1 -> mu^2 + mu - 1 = 0
fos = first_order_system(prof, 1.0)
print("mu at + for lam=1:", np.sort_complex(fos.endpoint_mu("+")))
print("expected:", sorted([(-1 - np.sqrt(5)) / 2, (-1 + np.sqrt(5)) / 2]))
print("mu at - for lam=0:", first_order_system(prof, 0.0).endpoint_mu("-"))
print("splitting lam=1:", fos.check_splitting())

# coefficient matrix vs FD of A
xi = 0.37
M = fos.coefficient(xi)
h = 1e-6
Afd = (burgers.flux_jacobian(np.array([prof.state(xi + h)]))
       - burgers.flux_jacobian(np.array([prof.state(xi - h)]))) / (2 * h)
print("Aprime analytic vs FD:", M[1, 0] - 1.0, "fd:", -Afd[0, 0],
      "diff", abs((1.0 - M[1, 0]) - Afd[0, 0]))

t0 = time.time()
D0 = evans_D(prof, 0.0)
t1 = time.time()
print("D(0) =", D0, "abs", abs(D0), f"({t1-t0:.3f}s)")
D1 = evans_D(prof, 1.0)
print("D(1) =", D1, "abs", abs(D1))
Dc = evans_D(prof, 0.3 + 0.4j)
Dcc = evans_D(prof, 0.3 - 0.4j)
print("conj symmetry:", abs(np.conj(Dc) - Dcc), "rel",
      abs(np.conj(Dc) - Dcc) / abs(Dc))

# dual route
for lam in (1.0, 0.3 + 0.4j, 0.05):
    Da = evans_D(prof, lam)
    Db = _shoot_determinant(prof, lam)
    print(f"dual lam={lam}: compound {Da:.12g} shoot {Db:.12g} "
          f"rel {abs(Da - Db) / abs(Da):.3g}")

# tolerance refinement
Da = evans_D(prof, 1.0, rtol=1e-8, atol=1e-10)
Db = evans_D(prof, 1.0, rtol=1e-11, atol=1e-13)
print("refinement drift:", abs(Da - Db) / abs(Db))

# init scale proportionality
Ds = evans_D(prof, 0.7 + 0.2j, init_scale=(2.3 - 1.1j, 0.7 + 0.4j))
Dp = evans_D(prof, 0.7 + 0.2j)
print("scale ratio:", Ds / Dp, "expected", (2.3 - 1.1j) * (0.7 + 0.4j))

# CR residual at 0.3+0.4j
h = 1e-3
lam0 = 0.3 + 0.4j
Dx1 = evans_D(prof, lam0 + h); Dx2 = evans_D(prof, lam0 - h)
Dy1 = evans_D(prof, lam0 + 1j * h); Dy2 = evans_D(prof, lam0 - 1j * h)
dx = (Dx1 - Dx2) / (2 * h)
dy = (Dy1 - Dy2) / (2 * h)
dbar = 0.5 * (dx + 1j * dy)
dlam = 0.5 * (dx - 1j * dy)
print("CR residual:", abs(dbar), "rel", abs(dbar) / abs(dlam))

t0 = time.time()
ev = winding_check(prof, R=5.0, r0=0.05)
t1 = time.time()
print(f"burgers winding {ev.winding} |D'(0)| {abs(ev.Dprime0):.6g} "
      f"R {ev.R} r0 {ev.r0} samples {len(ev.contour)} ({t1-t0:.1f}s)")
print("min|D| on contour", np.abs(ev.values).min(), "max",
      np.abs(ev.values).max())
