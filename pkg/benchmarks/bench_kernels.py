"""Compare the compiled and numpy kernel backends on recognizer-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Times im2col, col2im, max-pool forward and backward for each backend and
prints the median per call plus the speedup of the compiled path.
"""

import argparse
import statistics
import time

import numpy as np

from digitlab import kernels

# (batch, channels, side, kernel): first and third recognizer blocks at batch 64
SHAPES = [(64, 1, 32, 2), (64, 32, 16, 3), (64, 64, 8, 5)]


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def bench(repeat=5):
    backends = kernels.available_backends()
    rows = []
    rng = np.random.default_rng(0)
    for n, c, side, k in SHAPES:
        xp = rng.normal(size=(n, c, side + k - 1, side + k - 1)).astype(np.float32)
        x = rng.normal(size=(n, c, side, side)).astype(np.float32)
        ph = -(-side // 2)
        timings = {}
        for name, mod in backends.items():
            cols = mod.im2col(xp, k, k, 1, side, side)
            out, arg = mod.maxpool_forward(x, 2, 2, ph, ph)
            timings[name] = {
                "im2col": _time(lambda: mod.im2col(xp, k, k, 1, side, side), repeat),
                "col2im": _time(lambda: mod.col2im(cols, xp.shape, k, k, 1, side, side), repeat),
                "pool fwd": _time(lambda: mod.maxpool_forward(x, 2, 2, ph, ph), repeat),
                "pool bwd": _time(lambda: mod.maxpool_backward(out, arg, x.shape), repeat),
            }
        for op in timings["python"]:
            row = {"shape": f"{n}x{c}x{side}x{side} k{k}", "op": op}
            row.update({b: t[op] for b, t in timings.items()})
            rows.append(row)
    return rows


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    rows = bench(args.repeat)
    compiled = "cython" in rows[0]
    print(f"{'input':<22}{'op':<10}{'python ms':>11}" + (f"{'cython ms':>11}{'speedup':>9}" if compiled else ""))
    for r in rows:
        line = f"{r['shape']:<22}{r['op']:<10}{r['python'] * 1e3:>11.2f}"
        if compiled:
            line += f"{r['cython'] * 1e3:>11.2f}{r['python'] / r['cython']:>8.1f}x"
        print(line)
    if not compiled:
        print("compiled kernels not built; only the numpy backend was timed")


if __name__ == "__main__":
    main()
