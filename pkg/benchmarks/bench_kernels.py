"""Compare the compiled and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times im2col, col2im and a full conv2d forward+backward at the encoder's
stage shapes (batch 96, 32x32 input) with each backend, and checks that
both backends return identical bytes.
"""
import argparse
import timeit

import numpy as np

from dlif.tensor import Tensor, backward, kernels, ops

# (input shape, out channels, stride) for each conv in the default encoder
SHAPES = [
    ((96, 3, 34, 34), 16, 2), ((96, 16, 18, 18), 16, 1),
    ((96, 16, 18, 18), 32, 2), ((96, 32, 10, 10), 32, 1),
    ((96, 32, 10, 10), 64, 2), ((96, 64, 6, 6), 64, 1),
]


def conv_fwd_bwd(x, w):
    xt = Tensor(x, requires_grad=True)
    wt = Tensor(w, requires_grad=True)
    backward(ops.sum(ops.conv2d(xt, wt, stride=1, padding=1)))


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable; build with `pip install -e . --no-build-isolation`")
        return
    compiled = (kernels.im2col, kernels.col2im)
    pure = (kernels.im2col_numpy, kernels.col2im_numpy)
    rng = np.random.default_rng(0)
    print(f"{'shape':>22s} {'op':>7s} {'numpy ms':>9s} {'cython ms':>9s} {'speedup':>7s}")
    totals = {"numpy": 0.0, "cython": 0.0}
    for shape, c_out, stride in SHAPES:
        x = rng.normal(size=shape)
        cols = kernels.im2col_numpy(x, 3, 3, stride)
        g = rng.normal(size=cols.shape)
        assert kernels.im2col(x, 3, 3, stride).tobytes() == cols.tobytes()
        assert kernels.col2im(g, shape, 3, 3, stride).tobytes() == kernels.col2im_numpy(g, shape, 3, 3, stride).tobytes()
        for op, k in (("im2col", 0), ("col2im", 1)):
            call = (lambda f: lambda: f(x, 3, 3, stride)) if k == 0 else (lambda f: lambda: f(g, shape, 3, 3, stride))
            tn, tc = bench(call(pure[k]), args.repeat), bench(call(compiled[k]), args.repeat)
            totals["numpy"] += tn
            totals["cython"] += tc
            print(f"{str(shape):>22s} {op:>7s} {tn:9.2f} {tc:9.2f} {tn / tc:6.2f}x")

    x = rng.normal(size=(96, 16, 16, 16))
    w = rng.normal(size=(32, 16, 3, 3))
    times = {}
    for name, (i2c, c2i) in (("numpy", pure), ("cython", compiled)):
        kernels.im2col, kernels.col2im = i2c, c2i
        times[name] = bench(lambda: conv_fwd_bwd(x, w), args.repeat)
    kernels.im2col, kernels.col2im = compiled
    print(f"kernel totals: numpy {totals['numpy']:.1f} ms, cython {totals['cython']:.1f} ms")
    print(f"conv2d fwd+bwd (96x16x16x16 -> 32): numpy {times['numpy']:.1f} ms, cython {times['cython']:.1f} ms "
          f"({times['numpy'] / times['cython']:.2f}x)")


if __name__ == "__main__":
    main()
