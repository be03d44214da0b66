"""Time the numba and numpy kernel paths on shapes seen during training.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--batch B]
"""

import argparse
import time

import numpy as np

from metaquant import _kernels as K


def best_of(fn, repeats):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(batch, rng):
    f32 = np.float32
    for c, hw in ((8, 16), (16, 8), (32, 4)):
        x = rng.standard_normal((batch, c, hw, hw)).astype(f32)
        cols = K.im2col_numpy(x, 3, 3, 1, 1)
        yield f"im2col   c={c:<2} {hw}x{hw}", K.im2col_numpy, K.im2col_numba, (x, 3, 3, 1, 1)
        yield f"col2im   c={c:<2} {hw}x{hw}", K.col2im_numpy, K.col2im_numba, (cols, x.shape, 3, 3, 1, 1)
        for name, r, lo, hi in (("floor", K.ROUND_FLOOR, -7, 7), ("sign", K.ROUND_SIGN, -1, 1)):
            yield (f"quant/{name:<5} c={c:<2} {hw}x{hw}", K.quantize_numpy, K.quantize_numba,
                   (x, f32(0.3), f32(lo), f32(hi), r))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, f_np, f_nb, a in cases(args.batch, rng):
        assert all(np.array_equal(u, v) for u, v in zip(np.atleast_1d(f_np(*a)), np.atleast_1d(f_nb(*a))))
        t_np = best_of(lambda: f_np(*a), args.repeats)
        t_nb = best_of(lambda: f_nb(*a), args.repeats)
        print(f"{label:<28}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
