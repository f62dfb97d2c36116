#!/usr/bin/env python3
"""Tabulate message costs of the redundant tree against the baseline.

Shows the closed forms hold run by run: (P/2) log2 P exchanges for the
redundant panel tree against P - 1 sends for the plain reduction, and one
exchange against two sends per trailing pair step.
"""

import argparse

from ftqr.driver import Distribution, factor
from ftqr.fabric import PHASE_TRAILING
from ftqr.rng import random_matrix
from ftqr.tsqr import tsqr_allreduce


def count(trace, kind, phase=None):
    return sum(1 for ev in trace if ev.kind == kind
               and (phase is None or ev.phase == phase))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--cols", type=int, default=4)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    n = args.cols
    print("panel tree (single panel, per run):")
    print(f"{'P':>4} {'ft exchanges':>14} {'(P/2)log2P':>12} "
          f"{'base sends':>12} {'P-1':>6}")
    for P in (2, 4, 8, 16):
        A = random_matrix(P * n, n, seed=args.seed)
        blocks = [A[i * n:(i + 1) * n].copy() for i in range(P)]
        _, ft = tsqr_allreduce(blocks)
        _, base = tsqr_allreduce([b.copy() for b in blocks], mode="baseline")
        steps = P.bit_length() - 1
        print(f"{P:>4} {count(ft.trace, 'EXCHANGE'):>14} "
              f"{(P // 2) * steps:>12} {count(base.trace, 'SEND'):>12} "
              f"{P - 1:>6}")

    print("\ntrailing update (first panel, per step):")
    m, ncols, b, P = 64, 16, 4, 8
    A = random_matrix(m, ncols, seed=args.seed)
    dist = Distribution.even(m, ncols, b, P)
    ft = factor(A, dist, mode="ft")
    base = factor(A, dist, mode="baseline")
    print(f"{'step':>5} {'ft exchanges':>14} {'ft sends':>10} "
          f"{'base sends':>12} {'base active':>12}")
    for s in range(P.bit_length() - 1):
        fte = [ev for ev in ft.outcome.trace
               if ev.phase == PHASE_TRAILING and ev.panel == 0
               and ev.step == s]
        bse = [ev for ev in base.outcome.trace
               if ev.phase == PHASE_TRAILING and ev.panel == 0
               and ev.step == s]
        active = {ev.rank for ev in bse} | {
            ev.peer for ev in bse if ev.peer is not None}
        print(f"{s:>5} {sum(1 for e in fte if e.kind == 'EXCHANGE'):>14} "
              f"{sum(1 for e in fte if e.kind == 'SEND'):>10} "
              f"{sum(1 for e in bse if e.kind == 'SEND'):>12} "
              f"{len(active):>12}")


if __name__ == "__main__":
    main()
