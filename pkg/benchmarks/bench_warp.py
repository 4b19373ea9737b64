"""Compare the compiled and numpy warp kernels.

Usage: python benchmarks/bench_warp.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from mfvfi import kernels

CASES = [
    # (batch, channels, M, H, W)
    (1, 3, 9, 64, 64),
    (2, 3, 9, 64, 64),
    (1, 8, 9, 64, 64),
    (1, 3, 25, 128, 128),
]


def make_inputs(b, c, m, h, w, seed=0):
    rng = np.random.default_rng(seed)
    frame = rng.random((b, c, h, w), dtype=np.float32)
    alpha = (rng.standard_normal((b, m, h, w)) * 3).astype(np.float32)
    beta = (rng.standard_normal((b, m, h, w)) * 3).astype(np.float32)
    omega = rng.dirichlet(np.ones(m), size=(b, h, w)).transpose(0, 3, 1, 2).astype(np.float32)
    return frame, alpha, beta, omega


def bench(backend, inputs, repeat):
    frame, alpha, beta, omega = inputs
    out = kernels.warp_forward(frame, alpha, beta, omega, backend=backend)
    g = np.ones_like(out)
    fwd = min(timeit.repeat(lambda: kernels.warp_forward(frame, alpha, beta, omega, backend=backend),
                            number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: kernels.warp_backward(frame, alpha, beta, omega, g, backend=backend),
                            number=1, repeat=repeat))
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'shape (B,C,M,H,W)':24s}" + "".join(f"{b + ' fwd':>14s}{b + ' bwd':>14s}" for b in backends)
          + ("   speedup fwd/bwd" if len(backends) > 1 else ""))
    for case in CASES:
        inputs = make_inputs(*case)
        times = {b: bench(b, inputs, args.repeat) for b in backends}
        row = f"{str(case):24s}" + "".join(f"{t[0] * 1e3:11.2f} ms{t[1] * 1e3:11.2f} ms" for t in times.values())
        if "cython" in times and "numpy" in times:
            row += (f"   {times['numpy'][0] / times['cython'][0]:5.1f}x /"
                    f" {times['numpy'][1] / times['cython'][1]:4.1f}x")
        print(row)


if __name__ == "__main__":
    main()
