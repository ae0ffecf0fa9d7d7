"""Compare the compiled and NumPy kernel backends on representative sizes.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from spectracast._kernels import compiled_backend, python_backend


def cases(rng):
    rows, cols = rng.integers(0, 64, 16).astype(np.float64), rng.integers(0, 64, 16).astype(np.float64)
    vals = rng.uniform(-100, -20, 16)
    x = rng.standard_normal((4, 32, 16, 16)).astype(np.float32)
    cols3 = python_backend.im2col(x, 3)
    g = rng.standard_normal(4 * 64 * 64 * 32).astype(np.float32)
    tok = rng.standard_normal((7 * 4 * 64, 32)).astype(np.float32)
    xhat, inv = python_backend.layer_norm_rows(tok, 1e-5)
    att = rng.standard_normal((7 * 4 * 16 * 2 * 4, 4)).astype(np.float32)
    prob = python_backend.softmax_rows(att)[0]
    return {
        "idw_grid 64x64, 16 sensors": lambda b: b.idw_grid(rows, cols, vals, 64, 64, 2.0),
        "im2col 4x32x16x16 k3": lambda b: b.im2col(x, 3),
        "col2im 4x32x16x16 k3": lambda b: b.col2im(cols3, 32, 16, 16, 3),
        "gelu_fwd 524288": lambda b: b.gelu_fwd(g),
        "layer_norm_rows 1792x32": lambda b: b.layer_norm_rows(tok, 1e-5),
        "layer_norm_rows_backward": lambda b: b.layer_norm_rows_backward(tok, xhat, inv),
        "softmax_rows 3584x4": lambda b: b.softmax_rows(att),
        "softmax_rows_backward": lambda b: b.softmax_rows_backward(prob, att),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled_backend is None:
        print("compiled backend not built; only the python timings are shown")
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(python_backend), number=1, repeat=args.repeat)) * 1e3
        if compiled_backend is None:
            print(f"{name:32s} {t_py:10.2f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(compiled_backend), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
