#!/usr/bin/env python3
"""Exhaustive single-failure sweep on one configuration.

Every (rank, panel, phase, step, point) kill the fault-free trace passes
through is injected in turn; each recovered run must reproduce the
fault-free R and trailing blocks bit for bit through a one-peer recovery.
"""

import argparse
import sys
import time

from ftqr.driver import Distribution, run_sweep
from ftqr.rng import random_matrix


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=32)
    parser.add_argument("--cols", type=int, default=16)
    parser.add_argument("--panel", type=int, default=4)
    parser.add_argument("--ranks", type=int, default=4)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--variant", choices=("literal", "symmetric"),
                        default="symmetric")
    args = parser.parse_args()

    A = random_matrix(args.rows, args.cols, args.seed)
    dist = Distribution.even(args.rows, args.cols, args.panel, args.ranks)
    start = time.perf_counter()
    _, rows = run_sweep(A, dist, variant=args.variant)
    elapsed = time.perf_counter() - start

    failures = [r for r in rows if not r.ok]
    for r in rows:
        rank, panel, phase, step, point = r.point
        mark = "ok" if r.ok else f"FAIL ({r.detail})"
        print(f"rank {rank} panel {panel} {phase:8s} step {step} "
              f"{point:15s} {mark}")
    print(f"\n{len(rows)} injections, {len(failures)} failures, "
          f"{elapsed:.1f}s")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
