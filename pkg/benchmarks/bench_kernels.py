"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes match the training hot paths: a 375-image augmentation batch at
28x28 for the affine warp, and a small conv stack for im2col/col2im.
"""
import argparse
import timeit

import numpy as np

from selftrain.kernels import backends


def cases(rng):
    imgs = rng.random((375, 28, 28, 1))
    theta = rng.uniform(-0.5, 0.5, 375)
    c, s = np.cos(theta), np.sin(theta)
    coeffs = np.stack([c, s, rng.uniform(-2, 2, 375), -s, c, rng.uniform(-2, 2, 375)], axis=1)
    x = rng.normal(size=(64, 8, 28, 28))
    cols = rng.normal(size=(64 * 28 * 28, 8 * 9))
    return {
        "affine_warp 375x28x28": lambda be: be.affine_warp(imgs, coeffs, 0.5),
        "im2col3x3 64x8x28x28": lambda be: be.im2col3x3(x),
        "col2im3x3 64x8x28x28": lambda be: be.col2im3x3(cols, 64, 8, 28, 28),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    found = backends()
    work = cases(np.random.default_rng(0))
    names = sorted(found)
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, fn in work.items():
        best = {}
        for name in names:
            be = found[name]
            fn(be)  # warm up
            best[name] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        row = f"{label:<24}" + "".join(f"{best[n] * 1e3:>10.2f}ms" for n in names)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>11.1f}x"
        print(row)
    if "cython" not in found:
        print("compiled extension not available; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
