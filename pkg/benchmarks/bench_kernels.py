"""Compare the compiled and numpy kernel backends on reference-CNN shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--dtype float32]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from foctta.kernels import backend_module

# (batch, channels, height) of the three conv blocks at B=64
SHAPES = [(64, 1, 16), (64, 16, 8), (64, 32, 4)]


def cases(mod, dtype):
    rng = np.random.default_rng(0)
    for n, c, h in SHAPES:
        x = rng.standard_normal((n, c, h, h)).astype(dtype)
        cols = mod.im2col(x, 3, 3, 1)
        y = rng.standard_normal((n, 16, h, h)).astype(dtype)
        pooled, arg = mod.maxpool2x2(y)
        yield f"im2col {n}x{c}x{h}x{h}", lambda x=x: mod.im2col(x, 3, 3, 1)
        yield f"col2im {n}x{c}x{h}x{h}", lambda cols=cols, c=c, h=h: mod.col2im(cols, c, h, h, 3, 3, 1)
        yield f"maxpool {n}x16x{h}x{h}", lambda y=y: mod.maxpool2x2(y)
        yield f"maxpool-bwd {n}x16x{h}x{h}", lambda p=pooled, a=arg, h=h: mod.maxpool2x2_backward(p, a, h, h)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--dtype", default="float32", choices=("float32", "float64"))
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)
    py = dict(cases(backend_module("python"), dtype))
    try:
        cy = dict(cases(backend_module("cython"), dtype))
    except ImportError:
        cy = {}
        print("compiled extension not built; timing numpy only")
    print(f"{'kernel':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in py.items():
        t_py = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if name in cy:
            t_cy = min(timeit.repeat(cy[name], number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<28}{t_py:>10.3f}{t_cy:>11.3f}{t_py / t_cy:>8.1f}x")
        else:
            print(f"{name:<28}{t_py:>10.3f}{'-':>11}{'-':>9}")


if __name__ == "__main__":
    main()
