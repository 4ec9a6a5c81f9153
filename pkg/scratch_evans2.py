import time
import numpy as np
import rollwaves as rw
from rollwaves.evans import (first_order_system, evans_D, winding_check,
                             evans_check_rollwave, _branch_distance,
                             _integration_spans, _evans_batch)

dw = rw.build_dressler_rollwave()
um = np.atleast_1d(dw.trace(1, "-", 0, 0.0))
up = np.atleast_1d(dw.trace(1, "+", 0, 0.0))
print("traces", um, up)
t0 = time.time()
prof = rw.solve_profile(dw.system, um, up, dw.speed)
print(f"profile {time.time()-t0:.2f}s window [{prof.xi_lo:.1f},"
      f" {prof.xi_hi:.1f}] omega {prof.omega_minus:.3f} {prof.omega_plus:.3f}")
print("spans", _integration_spans(prof, 1e-10))
print("branch dist", _branch_distance(prof))

fos = first_order_system(prof, 1.0)
print("splitting lam=1:", fos.check_splitting())
rng = np.random.default_rng(7)
for _ in range(5):
    lam = complex(rng.uniform(0.01, 30), rng.uniform(-30, 30))
    first_order_system(prof, lam).check_splitting()
print("random splitting ok")

t0 = time.time()
D1 = evans_D(prof, 1.0)
print(f"D(1) = {D1} ({time.time()-t0:.2f}s)")
D0 = evans_D(prof, 0.0)
print("D(0) =", D0, "abs", abs(D0))
Dc = evans_D(prof, 0.3 + 0.4j)
Dcc = evans_D(prof, 0.3 - 0.4j)
print("conj:", abs(np.conj(Dc) - Dcc) / abs(Dc))

t0 = time.time()
ev = winding_check(prof)
t1 = time.time()
print(f"winding {ev.winding} |D'(0)| {abs(ev.Dprime0):.6g} R {ev.R:.4g} "
      f"r0 {ev.r0:.4g} pts {len(ev.contour)} ({t1-t0:.1f}s)")
print("min|D|", np.abs(ev.values).min(), "max", np.abs(ev.values).max())

t0 = time.time()
rep = evans_check_rollwave(dw, tau_samples=5)
t1 = time.time()
print(f"full dressler sweep: {t1-t0:.1f}s")
for r in rep["rows"]:
    print("  ", {k: (f"{v:.6g}" if isinstance(v, float) else v)
                 for k, v in r.items()})

# batch vs single agreement
lams = np.array([0.5 + 0.2j, 2.0, 10.0 + 3j])
bb = _evans_batch(prof, lams, rtol=1e-10)
for l, b in zip(lams, bb):
    d = evans_D(prof, l)
    print(f"batch/single lam={l}: rel {abs(b - d) / abs(d):.3g}")

# burgers timing for full winding at samples=512 (doubling test cost)
bprof = rw.solve_profile(rw.burgers_system(), [1.0], [-1.0], 0.0)
t0 = time.time()
ev2 = winding_check(bprof, R=5.0, samples=512)
print(f"burgers 512: winding {ev2.winding} ({time.time()-t0:.1f}s), "
      f"|D'(0)| {abs(ev2.Dprime0):.6g}")
