"""Compiled vs pure-Python kernel timings on VoxCNN/VoxResNet-sized workloads.

Run: ``python benchmarks/bench_kernels.py [--repeat N]``. Each row times one
kernel call per backend on identical inputs and checks the outputs agree
bitwise before reporting the speedup.
"""

import argparse
import time

import numpy as np

from voxnet import kernels, ops


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x32 = np.ascontiguousarray(rng.random((32, 32, 32, 1), dtype=np.float32))
    x16 = np.ascontiguousarray(rng.random((16, 16, 16, 8), dtype=np.float32))
    x8 = np.ascontiguousarray(rng.random((8, 8, 8, 64), dtype=np.float32))
    conv = lambda x, s: (x, 3, 3, 3, s, s, s, 1, 1, 1, *[(n + 2 - 3) // s + 1 for n in x.shape[:3]])
    yield "im2col 32^3x1 s1", "im2col3d", conv(x32, 1)
    yield "im2col 16^3x8 s1", "im2col3d", conv(x16, 1)
    yield "im2col 8^3x64 s2", "im2col3d", conv(x8, 2)
    for name, x, s in (("col2im 16^3x8 s1", x16, 1), ("col2im 8^3x64 s2", x8, 2)):
        args = conv(x, s)
        cols = kernels.python_backend.im2col3d(*args)
        yield name, "col2im3d", (cols, *x.shape, *args[1:])
    xp = rng.random((2, 8, 32, 32, 32), dtype=np.float32)
    yield "maxpool 2x8x32^3 w2", "maxpool3d_forward", (xp, 2, 2, 2, 2, 2, 2, 16, 16, 16)
    out, arg = kernels.python_backend.maxpool3d_forward(*(xp, 2, 2, 2, 2, 2, 2, 16, 16, 16))
    g = rng.random(out.size, dtype=np.float32)
    yield "maxpool bwd 2x8x32^3", "maxpool3d_backward", (g, arg.reshape(-1), xp.size)


def end_to_end(repeat):
    rng = np.random.default_rng(1)
    x = rng.random((5, 1, 32, 32, 32), dtype=np.float32)
    w = rng.standard_normal((8, 1, 3, 3, 3)).astype(np.float32)
    spec = ops.ConvSpec(1, 8, 3, 1, 1)
    return _time(lambda: ops.conv3d(x, w, np.zeros(8, np.float32), spec), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for name, fn, fargs in cases(rng):
        fc = getattr(kernels.compiled_backend, fn)
        fp = getattr(kernels.python_backend, fn)
        a, b = fc(*fargs), fp(*fargs)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.array_equal(u, v), f"{name}: backends disagree"
        tc, tp = _time(lambda: fc(*fargs), args.repeat), _time(lambda: fp(*fargs), args.repeat)
        print(f"{name:<24} {tc * 1e3:>10.3f} {tp * 1e3:>10.3f} {tp / tc:>7.1f}x")
    print(f"conv3d 5x1x32^3 -> 8 ({kernels.BACKEND}): {end_to_end(args.repeat) * 1e3:.2f} ms")


if __name__ == "__main__":
    main()
