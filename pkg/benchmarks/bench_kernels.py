"""Time the compiled and numpy kernel backends on backbone-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step of the default SPS model per backend.
"""

import argparse
import time

import numpy as np

from portionmtl import kernels
from portionmtl.multitask import ModelSpec, TrainConfig, TwinModel, training_step

# (N, C, H, W, F) for each conv of the default backbone at batch 32
CASES = [(32, 3, 32, 32, 8), (32, 8, 16, 16, 16), (32, 16, 8, 8, 32)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_backend(name, repeat, rng):
    kernels.use_backend(name)
    rows = {}
    for n, c, h, w, f in CASES:
        x = rng.standard_normal((n, c, h, w))
        cols = kernels.im2col(x, 3, 3, 1, 1)
        dcols = rng.standard_normal(cols.shape)
        pooled_in = rng.standard_normal((n, f, h, w))
        out, idx = kernels.maxpool_forward(pooled_in, 2)
        gout = rng.standard_normal(out.shape)
        tag = f"{c}x{h}x{w}"
        rows[f"im2col {tag}"] = best_of(lambda: kernels.im2col(x, 3, 3, 1, 1), repeat)
        rows[f"col2im {tag}"] = best_of(lambda: kernels.col2im(dcols, x.shape, 3, 3, 1, 1), repeat)
        rows[f"maxpool fwd {f}x{h}x{w}"] = best_of(lambda: kernels.maxpool_forward(pooled_in, 2), repeat)
        rows[f"maxpool bwd {f}x{h}x{w}"] = best_of(
            lambda: kernels.maxpool_backward(gout, idx, pooled_in.shape, 2), repeat)

    model = TwinModel(ModelSpec("sps", 21), seed=0)
    cfg = TrainConfig()
    xb = rng.random((32, 3, 32, 32))
    yb = rng.integers(0, 21, 32)
    zb = 500 * rng.random(32)
    rows["sps training step (batch 32)"] = best_of(lambda: training_step(model, xb, yb, zb, cfg),
                                                   max(3, repeat // 4))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    names = [b for b in ("python", "cython") if b in kernels.BACKENDS]
    prev = kernels.BACKEND
    results = {b: bench_backend(b, args.repeat, np.random.default_rng(0)) for b in names}
    kernels.use_backend(prev)
    if "cython" not in results:
        print("compiled extension not built; showing the numpy backend only")
    label_w = max(len(k) for k in results["python"])
    print(f"{'kernel':<{label_w}}  " + "  ".join(f"{b + ' ms':>10}" for b in names)
          + ("  speedup" if len(names) == 2 else ""))
    for key in results["python"]:
        ms = [1e3 * results[b][key] for b in names]
        line = f"{key:<{label_w}}  " + "  ".join(f"{v:10.3f}" for v in ms)
        if len(ms) == 2:
            line += f"  {ms[0] / ms[1]:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
