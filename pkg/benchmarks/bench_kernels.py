"""Compare the numba and pure-numpy kernel backends.

Times each row kernel on a representative shape, then one full training
step of the toy model under each backend (in a subprocess, since the
backend is bound at import).

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 64] [--repeat 50]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from straightflow import _kernels as K

STEP = """
import time, numpy as np
from straightflow.objectives import loss_total
from straightflow.velonet import ModelConfig, VelocityModel
cfg = ModelConfig(height=8, width=8, patch_size=2, token_dim=48, pos_embed=True)
m = VelocityModel.init(cfg, 0)
r = np.random.default_rng(0)
p, g, y, e = (r.normal(size=(32, 3, 8, 8)) for _ in range(4))
t1, t2 = np.sort(r.uniform(size=(2, 32)), axis=0)
loss_total(m, p, g, y, e, t1, t2)
best = float("inf")
for _ in range({repeat}):
    s = time.perf_counter()
    loss_total(m, p, g, y, e, t1, t2)
    best = min(best, time.perf_counter() - s)
print(best)
"""


def kernel_times(rows, cols, repeat):
    r = np.random.default_rng(0)
    x = r.normal(size=(rows, cols))
    dy = r.normal(size=(rows, cols))
    out = {}
    for backend in ("numpy", "numba"):
        k = K.kernels(backend)
        y, rstd = k["layernorm_fwd"](x)
        p = k["softmax_fwd"](x)
        gy, sg = k["gelu_fwd"](x)
        calls = {
            "layernorm_fwd": lambda: k["layernorm_fwd"](x),
            "layernorm_bwd": lambda: k["layernorm_bwd"](dy, y, rstd),
            "softmax_fwd": lambda: k["softmax_fwd"](x),
            "softmax_bwd": lambda: k["softmax_bwd"](dy, p),
            "gelu_fwd": lambda: k["gelu_fwd"](x),
            "gelu_bwd": lambda: k["gelu_bwd"](dy, x, sg),
        }
        for name, fn in calls.items():
            fn()
            out[(name, backend)] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


def step_time(backend, repeat):
    env = dict(os.environ, STRAIGHTFLOW_BACKEND=backend)
    res = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return float(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    times = kernel_times(args.rows, args.cols, args.repeat)
    print(f"kernel timings, {args.rows}x{args.cols} float64 (best of {args.repeat})")
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name in ("layernorm_fwd", "layernorm_bwd", "softmax_fwd", "softmax_bwd", "gelu_fwd", "gelu_bwd"):
        a, b = times[(name, "numpy")], times[(name, "numba")]
        print(f"{name:<16}{a * 1e3:>10.3f}{b * 1e3:>10.3f}{a / b:>9.2f}")
    reps = max(3, args.repeat // 10)
    a, b = step_time("numpy", reps), step_time("numba", reps)
    print(f"\ntraining step, batch 32 x 2 timesteps (best of {reps})")
    print(f"{'loss_total':<16}{a * 1e3:>10.1f}{b * 1e3:>10.1f}{a / b:>9.2f}")


if __name__ == "__main__":
    main()
