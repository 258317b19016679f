"""Compiled kernels against the numpy fallback.

Times ``kernels.run_periodic`` and ``kernels.run_box`` on both backends for
every scheme and prints microseconds per step and the speedup.  Run with::

    python benchmarks/bench_kernels.py [--steps 20000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from soshydro import kernels
from soshydro.gibbs import make_rng
from soshydro.lattice import parse_mobility
from soshydro.sim import SimParams, box_dt_limit

SCHEMES = {0: "em", 1: "cn", 2: "sweep"}


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_periodic(backend, spec, n, scheme, steps, repeat):
    mob = parse_mobility(spec)
    params = SimParams(n, mob, c_dt=0.01 if scheme == 0 else 0.25, horizon=1.0)
    coeffs = params.coefficients()

    def run():
        x = make_rng(0).normal(size=n)
        x -= x.mean()
        kernels.run_periodic(x, mob, steps, *coeffs, None, scheme, make_rng(1), None, 1, backend)

    return _time(run, repeat) / steps


def bench_box(backend, spec, l, scheme, steps, repeat):
    mob = parse_mobility(spec)
    dt = box_dt_limit(mob, scheme)

    def run():
        x = make_rng(0).normal(size=2 * l + 1)
        kernels.run_box(x, mob, steps, dt, scheme, make_rng(1), None, 1, backend)

    return _time(run, repeat) / steps


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy fallback is available")
    header = f"{'geometry':<10}{'mobility':<13}{'size':>6}{'scheme':>8}" + "".join(
        f"{b + ' us/step':>18}" for b in backends) + ("   speedup" if len(backends) > 1 else "")
    print(header)
    print("-" * len(header))
    cases = [("ring", bench_periodic, n) for n in (32, 128)] + [("box", bench_box, l) for l in (2, 6)]
    for geometry, fn, size in cases:
        for spec in ("constant(1)", "bump(0.1)"):
            for scheme in (0, 1, 2):
                per = {b: fn(b, spec, size, scheme, args.steps, args.repeat) for b in backends}
                row = f"{geometry:<10}{spec:<13}{size:>6}{SCHEMES[scheme]:>8}" + "".join(
                    f"{per[b] * 1e6:>18.2f}" for b in backends)
                if len(backends) > 1:
                    row += f"{per['numpy'] / per['cython']:>10.1f}x"
                print(row, flush=True)


if __name__ == "__main__":
    main()
