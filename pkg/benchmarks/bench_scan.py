"""Time the selective scan forward/backward on each available backend.

    python3 benchmarks/bench_scan.py --batch 128 --length 65 --channels 128 --state 8
"""

import argparse
import time

import numpy as np

from vssbackdoor import kernels


def make_inputs(batch, length, channels, state, dtype, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((batch, length, channels)).astype(dtype)
    delta = rng.uniform(1e-3, 0.1, (batch, length, channels)).astype(dtype)
    A = -np.exp(rng.uniform(0, np.log(state), (channels, state))).astype(dtype)
    Bm = rng.standard_normal((batch, length, state)).astype(dtype)
    Cm = rng.standard_normal((batch, length, state)).astype(dtype)
    return u, delta, A, Bm, Cm


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--length", type=int, default=65)
    p.add_argument("--channels", type=int, default=128)
    p.add_argument("--state", type=int, default=8)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    inputs = make_inputs(args.batch, args.length, args.channels, args.state, np.dtype(args.dtype), args.seed)
    dy = np.random.default_rng(args.seed + 1).standard_normal(inputs[0].shape).astype(args.dtype)
    print(f"shape (b={args.batch}, L={args.length}, E={args.channels}, N={args.state}) {args.dtype}")
    print(f"{'backend':<8} {'fwd s':>9} {'bwd s':>9}  max|y - y_numpy|")
    ref = kernels.scan_forward(*inputs, backend="numpy")[0]
    timings = {}
    for name in kernels.available_backends():
        y, hs = kernels.scan_forward(*inputs, backend=name)
        fwd = best_of(lambda: kernels.scan_forward(*inputs, backend=name), args.repeat)
        bwd = best_of(lambda: kernels.scan_backward(*inputs, hs, dy, backend=name), args.repeat)
        err = float(np.max(np.abs(y.astype(np.float64) - ref)))
        print(f"{name:<8} {fwd:9.4f} {bwd:9.4f}  {err:.2e}")
        timings[name] = fwd + bwd
    if "cython" in timings:
        print(f"cython speedup over numpy (fwd+bwd): {timings['numpy'] / timings['cython']:.1f}x")


if __name__ == "__main__":
    main()
