#!/usr/bin/env python3
"""Benchmark the factor-grid kernels: compiled extension vs numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--samples N] [--repeat K]

The workload mirrors one training iteration's hot path: a batch of ray
samples queried against a field (forward) and the matching gradient
scatter (backward).
"""

import argparse
import time

import numpy as np

from fieldchain import kernels


def make_workload(rng, resolution, rd, ra, samples):
    n = resolution + 1
    return dict(
        den_planes=rng.normal(size=(3, rd, n, n)),
        den_lines=rng.normal(size=(3, rd, n)),
        app_planes=rng.normal(size=(3, ra, n, n)),
        app_lines=rng.normal(size=(3, ra, n)),
        coords=rng.uniform(0, n - 1, size=(samples, 3)),
    )


def bench(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=65536)
    ap.add_argument("--resolution", type=int, default=128)
    ap.add_argument("--density-components", type=int, default=8)
    ap.add_argument("--appearance-components", type=int, default=24)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    w = make_workload(
        rng, args.resolution, args.density_components,
        args.appearance_components, args.samples,
    )
    d_sigma = rng.normal(size=args.samples)
    d_feats = rng.normal(size=(args.samples, 3 * args.appearance_components))

    backends = ["python"]
    if kernels.HAVE_COMPILED:
        backends.append("compiled")
    else:
        print("note: compiled extension not built; benchmarking numpy only")

    print(
        f"workload: {args.samples} samples, {args.resolution}^3 grid, "
        f"{args.density_components}+{args.appearance_components} components, "
        f"best of {args.repeat}"
    )
    print(f"{'backend':>9} {'forward':>12} {'backward':>12} {'samples/s fwd':>14}")
    results = {}
    for name in backends:
        mod = kernels.get_backend(name)

        def fwd():
            mod.vm_forward(**w)

        grads = tuple(
            np.zeros_like(w[k])
            for k in ("den_planes", "den_lines", "app_planes", "app_lines")
        )

        def bwd():
            mod.vm_backward(*w.values(), d_sigma, d_feats, grads, True)

        t_f = bench(fwd, args.repeat)
        t_b = bench(bwd, args.repeat)
        results[name] = (t_f, t_b)
        print(
            f"{name:>9} {t_f * 1e3:>10.2f}ms {t_b * 1e3:>10.2f}ms "
            f"{args.samples / t_f:>14.3g}"
        )
    if len(results) == 2:
        sf = results["python"][0] / results["compiled"][0]
        sb = results["python"][1] / results["compiled"][1]
        print(f"speedup: forward {sf:.1f}x, backward {sb:.1f}x")


if __name__ == "__main__":
    main()
