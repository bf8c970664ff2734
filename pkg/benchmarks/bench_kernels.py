"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from subcal import _backend
from subcal.online_calibration import MulticalibrationEngine


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_mc_chunk(kern, T=2000, D=200, lam=10):
    rng = np.random.default_rng(0)
    G = np.ascontiguousarray(rng.random((T, D)) * (rng.random((T, D)) < 0.3))
    y = rng.integers(0, 2, T).astype(float)
    u = rng.random(T)

    def run():
        eng = MulticalibrationEngine(D, lam, T, backend=kern)
        eng.step_chunk(G, y, u)

    return run


def bench_greedy(kern, n=1000, T=500):
    rng = np.random.default_rng(1)
    F = np.ascontiguousarray((rng.random((n, T)) < rng.random((n, 1))).astype(float))
    order = np.arange(n, dtype=np.int64)
    return lambda: kern.greedy_cover(F, 0.05 * T, order, 0)


def bench_indicator(kern, n=4096, p=5, M=500, k=2):
    rng = np.random.default_rng(2)
    tx = rng.normal(size=(n, p))
    th = rng.normal(size=(M * k, p))
    off = rng.normal(size=M * k)
    cols = np.repeat(np.arange(M), k).astype(np.int64)
    gs = np.tile(np.arange(k), M).astype(np.int64)
    out = np.zeros((n, M * k))
    oc = np.arange(M * k, dtype=np.int64)
    return lambda: kern.indicator_matrix(tx, th, off, k, cols, gs, out, oc)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args(argv)
    names = ["python"]
    try:
        _backend.get_kernels("cython")
        names.insert(0, "cython")
    except ImportError:
        print("compiled kernels unavailable; timing the fallback only")
    cases = [("mc_chunk T=2000 D=200", bench_mc_chunk), ("greedy_cover 1000x500", bench_greedy),
             ("indicator_matrix 4096x1000", bench_indicator)]
    print(f"{'kernel':<28}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, make in cases:
        ts = []
        for name in names:
            kern = name if make is bench_mc_chunk else _backend.get_kernels(name)
            ts.append(best_of(make(kern), a.repeat))
        row = f"{label:<28}" + "".join(f"{t * 1e3:>10.1f}ms" for t in ts)
        if len(ts) == 2:
            row += f"{ts[1] / ts[0]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
