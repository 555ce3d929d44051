"""Compiled vs pure-Python kernel timings.

Kernel rows call both implementations directly. The end-to-end row runs a
cnn-small PGD attack in a subprocess per backend, selecting the fallback with
ADVBENCH_PURE_PYTHON=1.

    python3 benchmarks/bench_kernels.py --batch 256 --repeat 5
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from advbench import _kernels_py

try:
    from advbench import _kernels as _compiled
except ImportError:
    _compiled = None

E2E = """
import time, numpy as np
from advbench.attacks import AttackConfig, pgd_untargeted
from advbench.data import N_LABELS
from advbench.models import ModelConfig, init_model
rng = np.random.default_rng(0)
x = rng.uniform(size=({n}, 1, 32, 32)).astype(np.float32)
y = (rng.uniform(size=({n}, N_LABELS)) < 0.2).astype(np.int8)
m = init_model(ModelConfig("cnn-small"))
t = time.perf_counter()
pgd_untargeted(m, x, y, AttackConfig(1 / 255, {steps}))
print(time.perf_counter() - t)
"""


def kernel_cases(n):
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((n, 1, 32, 32)).astype(np.float32)
    w1 = rng.standard_normal((8, 1, 3, 3)).astype(np.float32)
    x2 = rng.standard_normal((n, 8, 15, 15)).astype(np.float32)
    w2 = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    g2 = rng.standard_normal((n, 16, 13, 13)).astype(np.float32)
    p = rng.standard_normal((n, 8, 30, 30)).astype(np.float32)
    return {
        "conv1 forward": lambda k: k.conv2d_forward(x1, w1),
        "conv2 forward": lambda k: k.conv2d_forward(x2, w2),
        "conv2 grad input": lambda k: k.conv2d_backward_input(g2, w2, 15, 15),
        "conv2 grad weight": lambda k: k.conv2d_backward_weight(x2, g2, 3, 3),
        "maxpool forward": lambda k: k.maxpool2x2_forward(p),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def end_to_end(n, steps, pure):
    env = dict(os.environ)
    env.pop("ADVBENCH_PURE_PYTHON", None)
    if pure:
        env["ADVBENCH_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", E2E.format(n=n, steps=steps)], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=256, help="inputs per kernel call")
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    ap.add_argument("--steps", type=int, default=5, help="PGD steps in the end-to-end row")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)

    if _compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print(f"{'case':<22}{'compiled s':>12}{'python s':>12}{'speedup':>9}")
    for name, fn in kernel_cases(args.batch).items():
        tc = best_of(lambda: fn(_compiled), args.repeat)
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        print(f"{name:<22}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.2f}")
    if not args.skip_e2e:
        tc = end_to_end(args.batch, args.steps, pure=False)
        tp = end_to_end(args.batch, args.steps, pure=True)
        print(f"{'pgd cnn-small e2e':<22}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
