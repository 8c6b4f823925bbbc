"""Compare the numba kernels with their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best wall time of each backend and the speed-up.  Both backends
run in the same process; the first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from attnflow import _kernels
from attnflow.geometry import min_norm_point_np, sample_uniform_array


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    X = sample_uniform_array((16, 32, 32), rng)
    T = rng.uniform(0, 2 * np.pi, (64, 32))
    omega = np.zeros(32)
    P = rng.standard_normal((200, 12))

    def sphere(f):
        return lambda: f(X.copy(), 4.0, 1.0, True, 0.01, 50, True, False)

    def angular(f):
        return lambda: f(T.copy(), 4.0, 1.0, omega, True, 0.01, 200)

    def gamma(f):
        return lambda: f(4.0, 32, True, 1e-3, 40000, 100)

    def wolfe(f):
        return lambda: [f(P[k:k + 40], 1e-9, 4800) for k in range(0, 160, 8)]

    return [
        ("advance_sphere  R=16 n=32 d=32, 50 steps", sphere(_kernels.advance_sphere_nb),
         sphere(_kernels.advance_sphere_np)),
        ("advance_angular R=64 n=32, 200 steps", angular(_kernels.advance_angular_nb),
         angular(_kernels.advance_angular_np)),
        ("gamma_curve     40000 steps", gamma(_kernels.gamma_curve_nb),
         gamma(_kernels.gamma_curve_np)),
        ("min_norm_point  20 x (40 points in R^12)", wolfe(_kernels.min_norm_point_nb),
         wolfe(min_norm_point_np)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':44s} {'numba':>10s} {'numpy':>10s} {'speed-up':>9s}")
    for name, fast, slow in cases():
        fast()  # compile
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:44s} {tf * 1e3:8.2f}ms {ts * 1e3:8.2f}ms {ts / tf:8.1f}x")


if __name__ == "__main__":
    main()
