"""Timing comparison between the compiled kernel core and the numpy fallback.

Micro-benchmarks call both implementations directly; the end-to-end row
re-runs this script in a subprocess with RANKALLOC_BACKEND forced, because
the backend is fixed at import time.

    python3 benchmarks/bench_backends.py [--repeat 200] [--skip-sample]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rankalloc import _kernels as K
from rankalloc._kernels import numpy_ref

try:
    from rankalloc._kernels import _fastcore
except ImportError:
    _fastcore = None

# (batch, in, out): sampler pair, PPO minibatch, refiner training batch
MICRO_SHAPES = [(2, 352, 256), (32, 148, 256), (32, 256, 256), (256, 256, 144)]


def _time(fn, repeat):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_micro(repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape (BxIN->OUT)':>22} {'numpy':>12} {'compiled':>12} {'speedup':>8}")
    for b, n_in, n_out in MICRO_SHAPES:
        x = np.ascontiguousarray(rng.normal(size=(b, n_in)))
        wt = np.ascontiguousarray(rng.normal(size=(n_out, n_in)))
        bias = rng.normal(size=n_out)
        t_np = _time(lambda: numpy_ref.affine_act(x, wt, bias, K.SILU), repeat)
        label = f"{b}x{n_in}->{n_out}"
        if _fastcore is None:
            print(f"{label:>22} {t_np * 1e6:>10.1f}us {'n/a':>12} {'n/a':>8}")
            continue
        t_c = _time(lambda: _fastcore.affine_act(x, wt, bias, K.SILU), repeat)
        print(f"{label:>22} {t_np * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us {t_np / t_c:>7.2f}x")


def _sample_once():
    # one full guided reverse chain at production-ish sizes
    from rankalloc import diffusion as df

    rng = np.random.default_rng(0)
    den = df.Denoiser(144, rng, d_latent=256, embed_dim=64, input_scale=0.125)
    sch = df.build_schedule("cosine", 1000)
    cfg = df.SamplerConfig(infer_steps=50, guidance=1.5)
    cond = rng.uniform(0, 8, 144)
    t0 = time.perf_counter()
    reps = 5
    for _ in range(reps):
        df.sample(cond, cfg, sch, den, rng)
    print(f"{(time.perf_counter() - t0) / reps:.6f}")


def bench_sample():
    print("\nfull 50-step guided sample, 144 modules, d_latent 256:")
    print(f"{'backend':>22} {'seconds':>12}")
    for backend in ("numpy", "compiled"):
        if backend == "compiled" and _fastcore is None:
            print(f"{backend:>22} {'n/a':>12}")
            continue
        env = dict(os.environ, RANKALLOC_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, __file__, "--_sample-child"],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            print(f"{backend:>22} failed: {proc.stderr.strip()}", file=sys.stderr)
            continue
        print(f"{backend:>22} {float(proc.stdout):>12.4f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--skip-sample", action="store_true")
    parser.add_argument("--_sample-child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if getattr(args, "_sample_child", False):
        _sample_once()
        return
    print(f"active backend: {K.BACKEND}")
    bench_micro(args.repeat)
    if not args.skip_sample:
        bench_sample()


if __name__ == "__main__":
    main()
