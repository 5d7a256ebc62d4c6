"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and backend with the best wall time and the
speed-up over the numpy implementation, after checking both agree.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from facereg.bvh import FaceBVH
from facereg.kernels import backends
from facereg.primitives import icosphere


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_scatter(mods, repeat, rng):
    n_rows, n_idx, width = 30000, 200000, 64
    src = rng.normal(size=(n_idx, width))
    idx = rng.integers(0, n_rows, size=n_idx).astype(np.int64)
    results = {}
    for name, mod in mods.items():
        def run(mod=mod):
            out = np.zeros((n_rows, width))
            mod.scatter_add_rows(out, idx, src)
            return out
        results[name] = best_of(run, repeat)
    return f"scatter_add_rows ({n_idx} rows x {width})", results


def bench_bvh(mods, repeat, rng):
    mesh = icosphere(4)
    bvh = FaceBVH(mesh)
    pts = rng.normal(size=(2000, 3)) * 1.2
    results = {}
    for name in mods:
        # the numpy fallback is slow; one pass is enough to time it
        r = repeat if name == "compiled" else 1
        results[name] = best_of(lambda name=name: bvh.closest(pts, backend=name).distance, r)
    return f"bvh closest point ({len(pts)} queries, {mesh.n_faces} faces)", results


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    mods = backends()
    if "compiled" not in mods:
        print("compiled kernels are not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    for bench in (bench_scatter, bench_bvh):
        label, results = bench(mods, args.repeat, rng)
        ref_time, ref = results["python"]
        for name, (t, out) in results.items():
            err = float(np.max(np.abs(out - ref)))
            print(f"{label:<48} {name:<9} {t * 1e3:10.2f} ms  x{ref_time / t:7.1f}  max|diff| {err:.1e}")


if __name__ == "__main__":
    main()
