"""Compare the numba and pure-numpy kernel backends.

Kernel timings call both implementations directly.  The training-step
timing runs a subprocess per backend, since the backend is chosen at import
time from FEDDSR_NO_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 50] [--no-step]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from feddsr import kernels
from feddsr._accel import USING_NUMBA

STEP = r"""
import time, numpy as np
from feddsr.kernels import BACKEND
from feddsr.model import build_network, build_adapters, resolve_taps, TapSpec
from feddsr.objectives import objective, LossWeights
from feddsr.tensor import GradientTape, Tensor
net = build_network(3, 8, 4, 0)
taps = resolve_taps(TapSpec())
ad = build_adapters(net, taps, 0)
rng = np.random.default_rng(0)
x = Tensor(rng.uniform(size=(16, 3, 16, 16)))
y = rng.integers(0, 4, size=(16, 16, 16)).astype(np.uint8)
w = LossWeights.uniform(2)
def step():
    with GradientTape() as tape:
        lb = objective(net, ad, taps, x, y, w)
    tape.backward(lb.tensor, net.parameters())
step()
t0 = time.perf_counter()
for _ in range(REPEAT):
    step()
print(BACKEND, (time.perf_counter() - t0) / REPEAT * 1e3)
"""


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 8, 16, 16)).astype(np.float32)
    cols = kernels.im2col_np(x, 3, 1, 1, 16, 16)
    pooled = rng.normal(size=(16, 8, 8, 8)).astype(np.float32)
    _, idx = kernels.maxpool_fwd_np(x)
    logits = rng.normal(size=(16, 4, 16, 16)).astype(np.float32)
    return {
        "im2col 8x16x16 k3": (lambda f: f(x, 3, 1, 1, 16, 16), "im2col"),
        "col2im 8x16x16 k3": (lambda f: f(cols, 16, 8, 16, 16, 3, 1, 1, 16, 16), "col2im"),
        "maxpool fwd": (lambda f: f(x), "maxpool_fwd"),
        "maxpool bwd": (lambda f: f(pooled, idx), "maxpool_bwd"),
        "softmax channels": (lambda f: f(logits), "softmax_channels"),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training step timing")
    args = ap.parse_args()

    if not USING_NUMBA:
        print("numba disabled in this process; run without FEDDSR_NO_NUMBA for a comparison")
        return 1
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (call, base) in cases().items():
        f_np = getattr(kernels, base + "_np")
        f_jit = getattr(kernels, base + "_jit")
        call(f_jit)  # compile
        t_np = min(timeit.repeat(lambda: call(f_np), number=args.repeat, repeat=3)) / args.repeat * 1e3
        t_jit = min(timeit.repeat(lambda: call(f_jit), number=args.repeat, repeat=3)) / args.repeat * 1e3
        print(f"{name:<20} {t_np:10.4f} {t_jit:10.4f} {t_np / t_jit:7.2f}x")

    if not args.no_step:
        print("\ntraining step (batch 16, width 8, two taps):")
        code = STEP.replace("REPEAT", str(args.repeat))
        for flag in ("0", "1"):
            env = dict(os.environ, FEDDSR_NO_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            backend, ms = out.stdout.split()
            print(f"  {backend:<6} {float(ms):8.2f} ms/step")
    return 0


if __name__ == "__main__":
    sys.exit(main())
