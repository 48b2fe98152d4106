"""Benchmark the jitted ray-tracing kernels against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--frames N] [--size WxH]

Both backends render the same frames of the builtin scenes; the report shows
per-frame wall time, throughput, and the max absolute difference between the
two outputs (expected at float rounding level).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from decompnerf import kernels
from decompnerf.scenegen import BUILTIN_SPECS, trace_frame


def bench(spec, n_frames, force):
    times = []
    out = None
    for i in range(n_frames):
        t0 = time.perf_counter()
        out = trace_frame(spec, spec.cameras[i % spec.n_frames], i % spec.n_frames, force=force)
        times.append(time.perf_counter() - t0)
    return np.array(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=10)
    args = ap.parse_args()

    if not kernels.numba_enabled():
        print("note: numba backend unavailable or disabled (DECOMPNERF_NUMBA=0); "
              "benchmarking numpy only")

    for name, make in BUILTIN_SPECS.items():
        spec = make()
        rays = spec.width * spec.height
        print(f"\nscene {name}: {spec.width}x{spec.height}, {args.frames} frames")
        results = {}
        for force in ("numba", "numpy") if kernels.numba_enabled() else ("numpy",):
            if force == "numba":
                bench(spec, 1, force)  # warm the JIT outside the timing
            times, out = bench(spec, args.frames, force)
            results[force] = out
            per = times.mean()
            print(
                f"  {force:>5}: {per * 1e3:8.2f} ms/frame "
                f"({rays / per / 1e6:6.2f} Mray/s, min {times.min() * 1e3:.2f} ms)"
            )
        if len(results) == 2:
            diff = max(
                np.abs(results["numba"][k] - results["numpy"][k]).max() for k in (0, 1)
            )
            print(f"  backend max abs diff (color, depth): {diff:.3e}")


if __name__ == "__main__":
    main()
