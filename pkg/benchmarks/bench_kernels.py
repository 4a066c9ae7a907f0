"""Time the hot kernels and one training step under each backend.

    python3 benchmarks/bench_kernels.py [--repeats 50] [--d 32]

Prints the median wall time per call in microseconds (steps in ms).
"""

import argparse
import statistics
import time

import numpy as np

from emtm import _kernels as K
from emtm import data as D
from emtm.numerics import backward
from emtm.student_net import ModelConfig
from emtm.trainer import TrainConfig, build_bundle, forward_losses


def median_time(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(d, rng):
    x = rng.normal(size=(16, 32, d))
    w = rng.normal(size=(7, d, d))
    bias = np.zeros(d)
    y, cols = K.conv1d_forward(x, w, bias)
    gamma, beta = np.ones(d), np.zeros(d)
    _, xhat, inv = K.layer_norm_forward(x, gamma, beta, 1e-5)
    att = rng.normal(size=(16, 8, 32, 32))
    p = K.softmax_last(att)
    ps, pe = rng.random((16, 32)), rng.random((16, 32))
    centers, weights = rng.uniform(0, 32, 5), rng.random(5)
    return {
        "conv1d forward": lambda: K.conv1d_forward(x, w, bias),
        "conv1d backward": lambda: K.conv1d_backward(y, cols, x.shape, w),
        "layer norm forward": lambda: K.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer norm backward": lambda: K.layer_norm_backward(x, xhat, inv, gamma),
        "softmax forward": lambda: K.softmax_last(att),
        "softmax backward": lambda: K.softmax_last_backward(att, p),
        "decode": lambda: K.decode_spans(ps, pe),
        "gaussian mixture": lambda: K.gaussian_mixture(centers, weights, 32, 1.6),
    }


def train_step(d):
    spec = D.SyntheticSpec(train=16, val=1, test=1)
    ds = D.generate_dataset(spec)
    tspecs = [D.SimulatedTeacherSpec(f, s) for f, s in (("span", 0.5), ("map2d", 1.0), ("proposals", 2.0))]
    banks = [D.unify_rows(r) for r in D.simulate_teachers(ds["train"], tspecs, 0)]
    batch = D.pack(ds["train"], spec.m_max, banks)
    bundle = build_bundle(ModelConfig(d=d, heads=8 if d % 8 == 0 else 1), TrainConfig(), 3)

    def step():
        bundle.store.zero_grad()
        br, _ = forward_losses(bundle, batch, np.random.default_rng(0), training=True)
        backward(br.node)

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--d", type=int, default=32)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])
    prev = K.backend()
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.d, rng)
    step = train_step(args.d)
    rows = []
    for name, fn in cases.items():
        row = [name]
        for b in backends:
            K.set_backend(b)
            row.append(f"{median_time(fn, args.repeats) * 1e6:10.1f} us")
        rows.append(row)
    row = [f"train step (B=16, d={args.d})"]
    for b in backends:
        K.set_backend(b)
        row.append(f"{median_time(step, max(3, args.repeats // 10)) * 1e3:10.1f} ms")
    rows.append(row)
    K.set_backend(prev)
    print(f"{'kernel':<28}" + "".join(f"{b:>14}" for b in backends))
    for r in rows:
        print(f"{r[0]:<28}" + "".join(f"{c:>14}" for c in r[1:]))


if __name__ == "__main__":
    main()
