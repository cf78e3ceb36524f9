"""Compare the compiled masked-softmax kernel against the numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The compiled path must be importable (build with `pip install -e .` or
`python3 setup.py build_ext --inplace`); the numpy path is always available.
"""

import argparse
import time

import numpy as np

from s2g import kernels


def bench(fn, args, repeats: int, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if kernels.BACKEND != "cython":
        print("compiled kernel not available; only the numpy path can be timed")
        return 1

    rng = np.random.default_rng(0)
    # rows x n mirrors (heads * seq_len) x seq_len at desk-model sizes
    shapes = [(64, 64), (512, 128), (2048, 512)]
    header = f"{'shape':>14} {'masked':>7} {'cython (ms)':>12} {'numpy (ms)':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for rows, n in shapes:
        x = rng.normal(size=(rows, n))
        mask = np.where(rng.random((rows, n)) < 0.3, -np.inf, 0.0)
        mask[:, 0] = 0.0
        for masked in (False, True):
            m = mask if masked else None
            t_cy = bench(kernels.masked_softmax_rows, (x, m), args.repeats)
            t_np = bench(kernels.masked_softmax_rows_numpy, (x, m), args.repeats)
            ref = kernels.masked_softmax_rows_numpy(x, m)
            got = kernels.masked_softmax_rows(x, m)
            assert np.allclose(got, ref, atol=1e-12), "backends disagree"
            print(f"{rows}x{n:>9} {str(masked):>7} {t_cy * 1e3:>12.3f} "
                  f"{t_np * 1e3:>12.3f} {t_np / t_cy:>7.2f}x")

    probs = rng.dirichlet(np.ones(128), size=512)
    g = rng.normal(size=(512, 128))
    t_cy = bench(kernels.softmax_backward_rows, (probs, g), args.repeats)
    t_np = bench(kernels.softmax_backward_rows_numpy, (probs, g), args.repeats)
    print(f"{'backward 512x128':>22} {t_cy * 1e3:>12.3f} {t_np * 1e3:>12.3f} "
          f"{t_np / t_cy:>7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
