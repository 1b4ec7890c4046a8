"""Benchmark the compiled kernels against the pure numpy/python fallbacks.

Usage: python benchmarks/bench_kernels.py [N]
"""

import sys
import time

import numpy as np

from visitlift._kernels import backends


def timeit(fn, *args, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_sweep(impls, n, rng):
    scores = np.sort(rng.choice(rng.uniform(0, 1, max(n // 50, 10)), n))
    rows = []
    for caliper, label in ((-1.0, "exact"), (1e-3, "caliper")):
        for name, impl in impls.items():
            rows.append((f"sweep_labels[{label}]", name, timeit(impl.sweep_labels, scores, caliper)))
    return rows


def bench_nearest(impls, n, rng):
    n_sites = 500
    n_groups = max(n // 1000, 1)
    site_lat = rng.uniform(35, 45, n_sites)
    site_lon = rng.uniform(-80, -70, n_sites)
    q_lat = rng.uniform(35, 45, n)
    q_lon = rng.uniform(-80, -70, n)
    bounds = np.linspace(0, n, n_groups + 1).astype(np.int64)
    cand_chunks = [
        rng.choice(n_sites, 9, replace=False).astype(np.int64) for _ in range(n_groups)
    ]
    cand_start = np.concatenate([[0], np.cumsum([c.size for c in cand_chunks])]).astype(np.int64)
    cand_sites = np.concatenate(cand_chunks)
    rows = []
    for name, impl in impls.items():
        rows.append(
            (
                "nearest_site[9 cand]",
                name,
                timeit(impl.nearest_site, q_lat, q_lon, bounds, cand_start, cand_sites, site_lat, site_lon),
            )
        )
    return rows


def bench_lump(impls, n, rng):
    n_dev = max(n // 20, 1)
    counts = rng.multinomial(n, np.full(n_dev, 1.0 / n_dev))
    dev_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    times = np.concatenate(
        [np.sort(rng.integers(0, 30 * 86400, c)) for c in counts]
    ).astype(np.int64)
    weights = rng.uniform(0.05, 1.0, n)
    rows = []
    for name, impl in impls.items():
        rows.append(("lump_windows", name, timeit(impl.lump_windows, times, weights, dev_start, 3600, 0.0)))
    return rows


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 1_000_000
    impls = backends()
    rng = np.random.default_rng(0)
    print(f"N = {n:,}; backends: {', '.join(impls)}")
    rows = []
    rows += bench_sweep(impls, n, rng)
    rows += bench_nearest(impls, n, rng)
    rows += bench_lump(impls, n, rng)
    width = max(len(r[0]) for r in rows) + 2
    by_kernel = {}
    for kernel, name, secs in rows:
        by_kernel.setdefault(kernel, {})[name] = secs
        print(f"{kernel:<{width}} {name:<10} {secs * 1000:10.2f} ms")
    print()
    for kernel, timings in by_kernel.items():
        if "compiled" in timings and "pure" in timings:
            print(f"{kernel:<{width}} speedup x{timings['pure'] / timings['compiled']:.1f}")


if __name__ == "__main__":
    main()
