#!/usr/bin/env python3
"""Benchmark exact vs auction-approximate EMD across point-set sizes.

Prints per-size wall time and, where the exact solve is affordable, the
relative cost gap of the approximate matching.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from shapepoint.shapemetrics import emd


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[32, 64, 128, 256, 512, 1024])
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--exact-max", type=int, default=512,
                        help="largest size for which exact EMD is timed")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'n':>6} {'exact (s)':>12} {'approx (s)':>12} {'rel gap':>10}")
    for n in args.sizes:
        exact_times, approx_times, gaps = [], [], []
        for _ in range(args.repeats):
            p = torch.tensor(rng.random((n, 3)))
            q = torch.tensor(rng.random((n, 3)))
            t0 = time.perf_counter()
            cost_a, _ = emd(p, q, mode="approx")
            approx_times.append(time.perf_counter() - t0)
            if n <= args.exact_max:
                t0 = time.perf_counter()
                cost_e, _ = emd(p, q, mode="exact")
                exact_times.append(time.perf_counter() - t0)
                gaps.append(float(cost_a - cost_e) / max(float(cost_e), 1e-12))
        exact = f"{np.mean(exact_times):12.4f}" if exact_times else f"{'—':>12}"
        gap = f"{np.mean(gaps):10.2e}" if gaps else f"{'—':>10}"
        print(f"{n:>6} {exact} {np.mean(approx_times):12.4f} {gap}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
