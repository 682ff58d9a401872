"""Timing comparison of the numba and numpy kernel paths.

Per-kernel microbenchmarks on training-shaped inputs, plus an end-to-end
train-step timing under each backend.  Run from the repo root:

    python3 benchmarks/bench_kernels.py [--steps 10] [--repeat 200]

The numba path pays a one-off JIT cost (cached on disk afterwards); timings
below exclude it via warmup calls.
"""

import argparse
import time

import numpy as np

from umnmt.kernels import get_kernels


def timeit(fn, repeat):
    fn()  # warmup / JIT
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def kernel_cases(rng, dtype=np.float32):
    b, t, d, heads, vocab = 16, 10, 64, 4, 28
    rows = b * t
    x = rng.normal(size=(rows, d)).astype(dtype)
    gain = np.ones(d, dtype=dtype)
    bias = np.zeros(d, dtype=dtype)
    logits = rng.normal(size=(rows, vocab)).astype(dtype)
    targets = rng.integers(0, vocab, size=rows)
    targets[::7] = 0
    q = rng.normal(size=(rows, d)).astype(dtype)
    k = rng.normal(size=(rows, d)).astype(dtype)
    w4 = np.abs(rng.normal(size=(b, heads, t, t))).astype(dtype)
    w4 /= w4.sum(axis=-1, keepdims=True)
    p = rng.normal(size=20000).astype(dtype)
    g = rng.normal(size=20000).astype(dtype)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    return {
        "softmax_fwd": lambda K: K["softmax_fwd"](logits),
        "layer_norm_fwd": lambda K: K["layer_norm_fwd"](x, gain, bias, 1e-5),
        "xent_fwd": lambda K: K["xent_fwd"](logits, targets, 0),
        "attn_scores": lambda K: K["attn_scores"](q, k, b, heads, 0.25),
        "attn_ctx": lambda K: K["attn_ctx"](w4, k, b, heads),
        "adam_step": lambda K: K["adam_step"](p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.01),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    tables = {name: get_kernels(name) for name in ("numpy", "numba")}
    print(f"{'kernel':16s} {'numpy':>12s} {'numba-jit':>12s} {'speedup':>9s}  active")
    for case, fn in cases.items():
        times = {}
        for backend, table in tables.items():
            if backend == "numba":  # measure the raw jit even where the
                table = dict(table)  # active table routes to numpy
                table[case] = table.get(f"{case}_jit", table[case])
            times[backend] = timeit(lambda: fn(table), repeat)
        ratio = times["numpy"] / times["numba"]
        active = "jit" if tables["numba"][case] is not tables["numpy"][case] else "numpy"
        print(f"{case:16s} {times['numpy'] * 1e6:10.1f}us {times['numba'] * 1e6:10.1f}us "
              f"{ratio:8.2f}x  {active}")


def bench_train_step(steps):
    import importlib
    import os
    import subprocess
    import sys

    code = (
        "import time, numpy as np\n"
        "from umnmt import corpus as C, training as TR, kernels\n"
        "from umnmt.model import ModelConfig\n"
        "data = C.gen_synthetic(C.SynthConfig(n_train=400), np.random.default_rng(7))\n"
        "td = TR.TrainData(data.train_x, data.train_y, [], data.vocab_x, data.vocab_y)\n"
        "cfg = ModelConfig(vocab_size_x=len(data.vocab_x), vocab_size_y=len(data.vocab_y))\n"
        f"tc = TR.TrainConfig(steps={steps}, batch_size=16, validate_every=0)\n"
        "TR.run_schedule(td, cfg, TR.TrainConfig(steps=2, batch_size=16, validate_every=0))\n"
        "t0 = time.time(); TR.run_schedule(td, cfg, tc)\n"
        f"print(f'{{kernels.BACKEND}}: {{(time.time() - t0) / {steps} * 1000:.1f}} ms/step')\n"
    )
    for flag in ("1", "0"):
        env = dict(os.environ, UMNMT_NUMBA=flag)
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_train:
        print("\nend-to-end train step:")
        bench_train_step(args.steps)


if __name__ == "__main__":
    main()
