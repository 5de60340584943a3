"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each case runs on both backends with identical inputs; the outputs are
compared before timing so a fast but wrong kernel shows up as a mismatch.
The last case times a whole free phase of a small conv net.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from eqprop import numerics as nm
from eqprop.model import Head, Scheme, Topology, init_params
from eqprop.phases import free_phase


def cases(rng):
    w1 = rng.standard_normal((16, 1, 5, 5))
    x1 = rng.standard_normal((64, 1, 28, 28))
    w2 = rng.standard_normal((32, 16, 5, 5))
    x2 = rng.standard_normal((64, 16, 12, 12))
    y2 = nm.conv2d(w2, x2)
    z = rng.standard_normal((64, 32, 24, 24))
    pooled, ind = nm.maxpool(z, 2)

    top = Topology((1, 28, 28), ((16, 5, 0, 2), (32, 5, 0, 2)), (10,), Head.SOFTMAX, Scheme.SYMMETRIC)
    params = init_params(top, rng)
    xb = rng.uniform(0, 1, (64, 1, 28, 28))

    return {
        "conv2d 1->16 5x5, 64x28x28": lambda: nm.conv2d(w1, x1),
        "conv2d 16->32 5x5, 64x12x12": lambda: nm.conv2d(w2, x2),
        "conv2d_transpose 32->16": lambda: nm.conv2d_transpose(w2, y2),
        "conv2d_weight_grad 16->32": lambda: nm.conv2d_weight_grad(x2, y2),
        "maxpool 2x2, 64x32x24x24": lambda: nm.maxpool(z, 2)[0],
        "unpool 2x2": lambda: nm.unpool(pooled, ind, z.shape, 2),
        "free phase T=10, batch 64": lambda: free_phase(xb, params, 10).state.flat(),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)

    backends = nm.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    original = nm.backend()
    rows = []
    try:
        for name, fn in cases(np.random.default_rng(0)).items():
            outs, times = {}, {}
            for b in backends:
                nm.set_backend(b)
                outs[b] = np.asarray(fn())
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            ref = outs[backends[-1]]
            mismatch = max(float(np.max(np.abs(o - ref))) for o in outs.values())
            rows.append([name] + [times.get(b, float("nan")) for b in ("python", "compiled")] + [mismatch])
    finally:
        nm.set_backend(original)

    print(f"{'case':<30} {'python s':>10} {'compiled s':>11} {'speedup':>8} {'max |diff|':>11}")
    for name, tp, tc, diff in rows:
        print(f"{name:<30} {tp:>10.4f} {tc:>11.4f} {tp / tc:>7.1f}x {diff:>11.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["case", "python_s", "compiled_s", "max_abs_diff"])
            wr.writerows(rows)


if __name__ == "__main__":
    main()
