"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Times im2col, col2im, the fused Adam update and one full training step of a
small three-branch ensemble under each available backend, and checks that
both backends produce identical results.
"""

import argparse
import time

import numpy as np

from deesco import kernels
from deesco.config import ExperimentConfig, TrainSchedule
from deesco.data import GazeBatch
from deesco.ensemble import EnsembleModel, branch_configs_from_preset
from deesco.trainer import AdamState, adam_step, training_step


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_batch(rng, n=32, crop=32):
    left = rng.uniform(0, 1, (n, 3, crop, crop))
    right = rng.uniform(0, 1, (n, 3, crop, crop))
    mask = np.zeros((n, 1, 16, 16))
    mask[:, :, 4:12, 4:12] = 1.0
    targets = rng.uniform(-0.9, 0.9, (n, 2))
    return GazeBatch(left, right, mask, targets, np.zeros(n, dtype=int), targets)


def bench_backend(name, repeat):
    prev = kernels.use_backend(name)
    try:
        rng = np.random.default_rng(0)
        x = rng.standard_normal((32, 16, 32, 64))
        cols = kernels.im2col(x, (3, 3), (1, 1), (1, 1), (32, 64))
        out = {"im2col": best_of(lambda: kernels.im2col(x, (3, 3), (1, 1), (1, 1), (32, 64)), repeat)}
        out["col2im"] = best_of(lambda: kernels.col2im(cols, x.shape, (3, 3), (1, 1), (1, 1), (32, 64)), repeat)

        p, g = rng.standard_normal(1_000_000), rng.standard_normal(1_000_000)
        m, v = np.zeros_like(p), np.zeros_like(p)
        out["adam (1M params)"] = best_of(
            lambda: kernels.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8), repeat)

        cfg = ExperimentConfig(
            branches=branch_configs_from_preset("Rh+Ou+Fc", crop_size=(32, 32), heatmap_size=32,
                                                conv_channels=[8, 16], fc_widths=[128]),
            schedule=TrainSchedule(batch_size=32))
        model = EnsembleModel(cfg.branches, seed=0)
        adam = AdamState()
        batch = make_batch(rng)

        def step():
            training_step(model, batch, cfg, np.random.default_rng(1), 0)
            adam_step(model.parameters(), adam, 2e-4)

        step()
        out["training step"] = best_of(step, max(3, repeat // 4))
        im = kernels.im2col(x, (3, 3), (1, 1), (1, 1), (32, 64))
        return out, (im, kernels.col2im(cols, x.shape, (3, 3), (1, 1), (1, 1), (32, 64)), p.copy())
    finally:
        kernels.use_backend(prev)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    results, arrays = {}, {}
    for b in backends:
        results[b], arrays[b] = bench_backend(b, args.repeat)
    print(f"{'kernel':<20}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for k in results[backends[0]]:
        row = f"{k:<20}" + "".join(f"{results[b][k] * 1e3:>16.3f}" for b in backends)
        if len(backends) > 1:
            row += f"   {results['python'][k] / results['cython'][k]:7.2f}x"
        print(row)
    if len(backends) > 1:
        same = all(np.array_equal(a, b) for a, b in zip(arrays["cython"][:2], arrays["python"][:2]))
        close = np.allclose(arrays["cython"][2], arrays["python"][2], rtol=0, atol=1e-15)
        print(f"im2col/col2im identical across backends: {same}; adam agrees to 1e-15: {close}")


if __name__ == "__main__":
    main()
