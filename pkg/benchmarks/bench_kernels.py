"""Compare the compiled ODE kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--particles 500] [--repeat 3]
"""

import argparse
import time

import numpy as np

from mipdcl import kernels
from mipdcl.engine import CYCLE_HOURS, DoseEvent, PkForcing, Schedule, integrate, pd_initial, propagate_pd
from mipdcl.models import PatientCovariates, PkParams, get_preset, pd_arrays, pk_vector
from mipdcl.population import HyperPrior, sample_individual


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    cov = PatientCovariates()
    gs = get_preset("gold-standard")
    pkv = pk_vector(PkParams(), cov)
    theta = sample_individual(HyperPrior.default().population(), (np.log(6.48), 0.1), np.random.default_rng(0),
                              size=args.particles)
    rows = pd_arrays(gs, theta[:, 0], theta[:, 1], theta[:, 2])
    y0 = pd_initial(np.exp(theta[:, 2]))
    forcing = PkForcing().extend(pkv, [DoseEvent(0.0, 360.0)], CYCLE_HOURS)
    sched = Schedule.q3w(360.0)

    cases = {
        f"PD batch, {args.particles} particles x 1 cycle":
            lambda b: propagate_pd(y0, rows, forcing, 0.0, CYCLE_HOURS, backend=b)[0],
        "coupled PK/PD, 1 patient x 6 cycles":
            lambda b: integrate(PkParams(), gs.pd(), cov, sched, backend=b).anc,
        "PK concentration profile, 1 cycle":
            lambda b: PkForcing().extend(pkv, [DoseEvent(0.0, 360.0)], CYCLE_HOURS, backend=b).c1,
    }
    backends = sorted(kernels.BACKENDS)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'case':45s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speed-up':>10s}  max |diff|")
    for name, fn in cases.items():
        res = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        line = f"{name:45s}" + "".join(f"{res[b][0]:11.4f}s" for b in backends)
        if len(backends) == 2:
            diff = float(np.max(np.abs(np.asarray(res["compiled"][1]) - np.asarray(res["python"][1]))))
            line += f"{res['python'][0] / res['compiled'][0]:9.1f}x  {diff:.2e}"
        print(line)


if __name__ == "__main__":
    main()
