"""Time one training step under the compiled and numpy backends.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import timeit

import numpy as np

from ticnet import kernels
from ticnet.network import Activation, NetworkSpec, init_params

CASES = [
    ("logistic 11->2, batch 32", NetworkSpec(11, (), 2, Activation.IDENTITY), 32),
    ("relu 16x2->10, batch 32", NetworkSpec(16, (16, 16), 10, Activation.RELU), 32),
    ("identity 64x3 skip->10, batch 64", NetworkSpec(16, (64, 64, 64), 10, Activation.IDENTITY, True), 64),
    ("relu 128x2->10, batch 256", NetworkSpec(49, (128, 128), 10, Activation.RELU), 256),
]


def bench_case(spec, batch, repeats):
    rng = np.random.default_rng(0)
    params = init_params(spec, 0)
    x = rng.standard_normal((batch, spec.input_dim))
    y = rng.integers(0, spec.num_classes, batch)
    velocity = np.zeros(len(params))
    out = np.empty(len(params))
    timings = {}
    for backend in kernels.available_backends():
        def step():
            _, g = kernels.batch_loss_grad(spec, params, x, y, out=out, backend=backend)
            kernels.momentum_step(params.values.copy(), velocity, g, 1e-3, 1e-4, 0.9, backend=backend)
        step()
        timings[backend] = min(timeit.repeat(step, number=repeats, repeat=5)) / repeats
    return timings


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()
    print(f"{'case':36s} {'python us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, spec, batch in CASES:
        t = bench_case(spec, batch, args.repeats)
        py = t["python"] * 1e6
        if "compiled" in t:
            c = t["compiled"] * 1e6
            print(f"{name:36s} {py:10.1f} {c:12.1f} {py / c:7.2f}x")
        else:
            print(f"{name:36s} {py:10.1f} {'n/a':>12s}")


if __name__ == "__main__":
    main()
