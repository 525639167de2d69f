"""Time the numba kernels against the numpy fallback.

Run: python benchmarks/bench_kernels.py --repeats 5
"""
import argparse
import time

import numpy as np

from spikelab import _kernels as K


def timeit(fn, repeats):
    fn()  # warm up (triggers compilation on the numba side)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size):
    rng = np.random.default_rng(0)
    t = np.array([1.0, 2.0])
    w = np.array([0.5, 0.5])
    b, inv = 2.5, 1.0 / np.sqrt(10 * 2.5)
    z = np.linspace(-1.0, 5.0, size) + 1e-3j
    x = np.linspace(1.0, 6.0, 50 * size)
    W = rng.normal(size=(4, 20 * size))
    return {
        "stieltjes grid": lambda: K.solve_stieltjes(z, t, w, b, inv),
        "phi values": lambda: K.phi_values(x, t, w, b, inv),
        "moment tables": lambda: K.moment_tables(W),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=400)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        print("numba not importable; only the numpy fallback is timed")
    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name in cases(args.size):
        times = []
        for backend in backends:
            with K.use_backend(backend):
                times.append(timeit(cases(args.size)[name], args.repeats))
        row = f"{name:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
