"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from metaprune import functional as F
from metaprune import kernels
from metaprune.tensor import Tensor

CASES = {
    "conv3x3 fwd+bwd (32x16x32x32 -> 32)": ("conv", (32, 16, 32, 32), (32, 16, 3, 3), 1),
    "conv3x3 s2 fwd+bwd (32x32x32x32 -> 64)": ("conv", (32, 32, 32, 32), (64, 32, 3, 3), 2),
    "depthwise3x3 fwd+bwd (32x64x32x32)": ("dw", (32, 64, 32, 32), (64, 1, 3, 3), 1),
    "depthwise3x3 s2 fwd+bwd (32x128x16x16)": ("dw", (32, 128, 16, 16), (128, 1, 3, 3), 2),
}


def make_step(kind, xs, ws, stride, rng):
    x = Tensor(rng.standard_normal(xs), requires_grad=True)
    w = Tensor(rng.standard_normal(ws), requires_grad=True)
    op = F.conv2d if kind == "conv" else F.depthwise_conv2d

    def step():
        x.grad = w.grad = None
        F.sum_all(op(x, w, stride=stride, pad=1)).backward()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"{'case':<44}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, (kind, xs, ws, stride) in CASES.items():
        times = []
        for b in backends:
            prev = kernels.use_backend(b)
            step = make_step(kind, xs, ws, stride, np.random.default_rng(0))
            step()  # warm-up
            times.append(min(timeit.repeat(step, number=1, repeat=args.repeat)))
            kernels.use_backend(prev)
        row = f"{name:<44}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[1] / times[0]:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
