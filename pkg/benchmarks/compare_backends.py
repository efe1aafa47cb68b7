#!/usr/bin/env python3
"""Timing comparison between the jit and pure-NumPy kernel backends.

The two backends compute bit-identical results (see tests/test_backends.py);
this script measures what the jit path buys on the hot kernels, and can also
run the serving benchmark end-to-end under each backend via COLDSERVE_BACKEND.

Usage:
    python benchmarks/compare_backends.py
    python benchmarks/compare_backends.py --serving --out results.json
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from coldserve._backends import numba_ops, numpy_ops


def best_of(fn, args, repeats):
    fn(*args)  # warmup; also triggers jit compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    d, r_max, batch = 256, 64, 32
    a = (rng.uniform(-1, 1, (batch, d)) / np.sqrt(d)).astype(np.float32)
    b = (rng.uniform(-1, 1, (d, d)) / np.sqrt(d)).astype(np.float32)
    x = rng.uniform(-1, 1, d).astype(np.float32)
    a_stack = (rng.uniform(-1, 1, (4, d, r_max)) / np.sqrt(d)).astype(np.float32)
    b_stack = (rng.uniform(-1, 1, (4, r_max, d)) / np.sqrt(r_max)).astype(np.float32)
    ranks = np.array([16, 64, 8, 32], dtype=np.int64)
    scalings = np.ones(4, dtype=np.float32)
    idx = rng.integers(-1, 4, batch).astype(np.int64)
    y = rng.uniform(-1, 1, (batch, d)).astype(np.float32)
    v = numpy_ops.bgmv_shrink(a, a_stack, ranks, idx)
    return {
        f"matmul {batch}x{d} @ {d}x{d}": ("matmul", (a, b)),
        f"matvec {d}x{d}": ("matvec", (b, x)),
        f"bgmv_shrink b={batch} d={d} r_max={r_max}": (
            "bgmv_shrink", (a, a_stack, ranks, idx),
        ),
        f"bgmv_expand_fused b={batch} d={d} r_max={r_max}": (
            "bgmv_expand_fused", (v, b_stack, ranks, scalings, idx, y),
        ),
    }


def run_kernel_bench(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, (name, args) in kernel_cases(rng).items():
        t_np = best_of(getattr(numpy_ops, name), args, repeats)
        t_nb = best_of(getattr(numba_ops, name), args, repeats)
        rows.append(
            {
                "kernel": label,
                "numpy_s": t_np,
                "numba_s": t_nb,
                "speedup": t_np / t_nb if t_nb > 0 else float("inf"),
            }
        )
    return rows


def run_serving_bench():
    """Drive the CLI bench under each backend and pull out tokens/s."""
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, COLDSERVE_BACKEND=backend)
        proc = subprocess.run(
            [
                sys.executable, "-m", "coldserve.cli", "bench",
                "--seed", "1", "--max-tokens", "32", "--requests", "2",
                "--out", f"/tmp/bench_{backend}.json",
            ],
            env=env,
            capture_output=True,
            text=True,
            check=True,
        )
        with open(f"/tmp/bench_{backend}.json") as fh:
            report = json.load(fh)
        out[backend] = {
            strategy: row["tokens_per_s"]
            for strategy, row in report["toy_transformer"].items()
        }
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--serving", action="store_true",
                        help="also compare end-to-end serving tokens/s")
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    kernel_rows = run_kernel_bench(args.repeats)
    print(f"{'kernel':<44} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for row in kernel_rows:
        print(
            f"{row['kernel']:<44} {row['numpy_s'] * 1e6:>10.1f}us "
            f"{row['numba_s'] * 1e6:>10.1f}us {row['speedup']:>8.1f}x"
        )

    report = {"kernels": kernel_rows}
    if args.serving:
        serving = run_serving_bench()
        report["serving_tokens_per_s"] = serving
        print("\nserving tokens/s by backend:")
        for backend, rows in serving.items():
            for strategy, tps in rows.items():
                print(f"  {backend:>6} {strategy:>8} {tps:>12.1f}")

    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
