"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeats 5] [--sizes 16x16x8 32x32x16]

For each volume size it times the raw im2col / col2im kernels and a full
conv forward + backward through the autodiff engine on each backend, checks
that both backends agree bit for bit, and prints a table.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from sghfnet import kernels
from sghfnet.tensor_engine import Tensor, conv, tsum


def parse_size(text):
    parts = tuple(int(v) for v in text.lower().split("x"))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected DxHxW, got {text!r}")
    return parts


def timed(fn, repeats):
    fn()  # warm-up
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return statistics.median(out)


def run_case(size, batch, c_in, c_out, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, c_in) + size)
    k = rng.standard_normal((c_out, c_in, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    od, oh, ow = size
    rows = {}
    results = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        cols = kernels.im2col3d(xp, 3, 3, 3, 1, 1, 1, od, oh, ow)

        def fwd_bwd():
            xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
            y = conv(xt, kt, padding=1)
            tsum(y * y).backward()
            return y.data, xt.grad, kt.grad

        results[backend] = fwd_bwd()
        rows[backend] = (
            timed(lambda: kernels.im2col3d(xp, 3, 3, 3, 1, 1, 1, od, oh, ow), repeats),
            timed(lambda: kernels.col2im3d(cols, *xp.shape[2:], 1, 1, 1), repeats),
            timed(fwd_bwd, repeats),
        )
    names = list(results)
    same = all(np.array_equal(a, b) for a, b in zip(results[names[0]], results[names[-1]]))
    return rows, same


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--sizes", type=parse_size, nargs="+", default=[(12, 12, 6), (16, 16, 8), (32, 32, 16)])
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--channels", type=int, nargs=2, default=(8, 16), metavar=("C_IN", "C_OUT"))
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the numpy backend is available", file=sys.stderr)
    prev = kernels.get_backend()
    print(f"{'size':>10} {'backend':>8} {'im2col ms':>10} {'col2im ms':>10} {'conv f+b ms':>12} {'speedup':>8}")
    try:
        for size in args.sizes:
            rows, same = run_case(size, args.batch, *args.channels, args.repeats)
            base = rows["python"][2]
            for backend, (a, b, c) in rows.items():
                label = "x".join(map(str, size))
                print(f"{label:>10} {backend:>8} {a * 1e3:10.2f} {b * 1e3:10.2f} {c * 1e3:12.2f} {base / c:8.2f}")
            if not same:
                print(f"  backends DISAGREE at {size}", file=sys.stderr)
                return 1
    finally:
        kernels.set_backend(prev)
    print("backends agree bitwise on every case")
    return 0


if __name__ == "__main__":
    sys.exit(main())
