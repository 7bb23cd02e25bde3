"""Compare the Cython and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Times each kernel at IsotopeNet-lite sizes (2000 bins, batch 64) and one
DRR training step on the full network, then prints a table of medians.
"""

import argparse
import statistics
import time

import numpy as np

from drrspec import kernels
from drrspec.model import build_isotopenet_lite, tic_normalize
from drrspec.training import TrainConfig, class_weights, objective_and_grad


def timed(fn, repeat):
    fn()
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases(n, batch, rng):
    x = rng.normal(size=(batch, 1, n))
    K = rng.normal(size=(8, 1, 5))
    g = rng.normal(size=(batch, 8, n))
    h = rng.normal(size=(batch, 4, n))
    W = rng.normal(size=(n // 8, 4, 4, 8))
    gl = rng.normal(size=(batch, 4, n // 8))
    return {
        "conv1d_forward": lambda m: m.conv1d_forward(x, K, 2),
        "conv1d_input_grad": lambda m: m.conv1d_input_grad(g, K, 2, n),
        "conv1d_kernel_grad": lambda m: m.conv1d_kernel_grad(x, g, 5, 2),
        "lc_forward": lambda m: m.lc_forward(h, W, 8),
        "lc_input_grad": lambda m: m.lc_input_grad(gl, W, 8, n),
        "lc_weight_grad": lambda m: m.lc_weight_grad(h, gl, 8, 8),
    }


def train_step(n, batch, rng):
    model = build_isotopenet_lite(n, seed=0)
    X = tic_normalize(rng.uniform(0, 1, size=(batch, n)))
    y = np.arange(batch) % 2
    cfg = TrainConfig(lambda1=1e-3, lambda2=1e-3)
    w = class_weights(y, 2)
    return lambda: objective_and_grad(model, X, y, cfg, w)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bins", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    names = ["numpy"] + (["cython"] if kernels.compiled_available() else [])
    rows = []
    for name, fn in cases(args.bins, args.batch, rng).items():
        rows.append((name, [timed(lambda: fn(kernels.get_backend_module(b)), args.repeat)
                            for b in names]))
    step = train_step(args.bins, args.batch, rng)
    times = []
    for b in names:
        kernels.use_backend(b)
        times.append(timed(step, max(3, args.repeat // 5)))
    rows.append(("drr train step", times))

    print(f"{'kernel':<22}" + "".join(f"{b + ' ms':>12}" for b in names)
          + ("   speedup" if len(names) == 2 else ""))
    for name, ts in rows:
        line = f"{name:<22}" + "".join(f"{1e3 * t:>12.3f}" for t in ts)
        if len(ts) == 2:
            line += f"{ts[0] / ts[1]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
