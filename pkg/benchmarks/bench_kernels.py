"""Benchmark the compiled stream kernels against the pure-python fallback.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fragaudit import _kernels_py
from fragaudit.data import synth_blobs, split_train_test
from fragaudit.evidence import estimate_consistency_mass
from fragaudit.net import NetSpec
from fragaudit.rng import child_seeds, states_from_seeds

try:
    from fragaudit import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _time(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_single_stream(backend, n):
    state = states_from_seeds(np.array([42], dtype=np.uint64))[0].copy()
    out = np.empty(n, dtype=np.uint64)

    def run():
        backend.fill_u64(state, out)

    secs = _time(run)
    return secs, n / secs


def bench_multi_stream(backend, K, m):
    seeds = child_seeds(7, 0, K)

    def run():
        states = states_from_seeds(seeds)
        out = np.empty((K, m), dtype=np.uint64)
        backend.fill_u64_multi(states, out)

    secs = _time(run)
    return secs, K * m / secs


def bench_estimator(draws):
    full = synth_blobs(516, 3, 2, 6.0, seed=1)
    tr, _ = split_train_test(full, 16, seed=2)
    spec = NetSpec((3, 6, 2))

    def run():
        estimate_consistency_mass(spec, tr, draws=draws, seed=3)

    secs = _time(run, repeats=2)
    return secs, draws / secs


def main():
    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.insert(0, ("cython", _kernels_c))
    else:
        print("compiled kernels unavailable; benchmarking the fallback only")

    print(f"{'kernel':<34}{'backend':<10}{'time':>10}{'throughput':>18}")
    n_single = 1_000_000
    for name, mod in backends:
        n = n_single if name == "cython" else n_single // 5
        secs, rate = bench_single_stream(mod, n)
        print(f"{'single stream fill (' + str(n) + ')':<34}{name:<10}"
              f"{secs * 1e3:>8.1f}ms{rate / 1e6:>12.1f} Mword/s")
    for name, mod in backends:
        secs, rate = bench_multi_stream(mod, 8192, 32)
        print(f"{'multi stream fill (8192x32)':<34}{name:<10}"
              f"{secs * 1e3:>8.1f}ms{rate / 1e6:>12.1f} Mword/s")
    secs, rate = bench_estimator(100_000)
    print(f"{'consistency estimator (1e5 draws)':<34}{'active':<10}"
          f"{secs:>9.2f}s{rate / 1e3:>12.1f} kdraw/s")

    # cross-check: identical streams from both backends
    if _kernels_c is not None:
        state_a = states_from_seeds(np.array([9], dtype=np.uint64))[0].copy()
        state_b = state_a.copy()
        a = np.empty(4096, dtype=np.uint64)
        b = np.empty(4096, dtype=np.uint64)
        _kernels_c.fill_u64(state_a, a)
        _kernels_py.fill_u64(state_b, b)
        assert np.array_equal(a, b), "backend outputs diverged"
        print("bit-exact backend agreement: OK")


if __name__ == "__main__":
    main()
