"""Command-line front end: factor, inject faults, sweep, verify, trace.

Exit codes: 0 success, 1 verification failure, 2 usage error,
3 unrecoverable simulated failure.

Fault grammar: RANK@PHASE:PANEL:STEP:POINT with PHASE in {TSQR, TRAILING}
and POINT in {BEFORE_EXCHANGE, AFTER_EXCHANGE}; --fault may repeat.
"""

import argparse
import sys

import numpy as np

from .driver import Distribution, factor, reconstruct_q, run_sweep
from .fabric import (FaultPlan, KillEvent, PHASES, POINTS, ProtocolError,
                     UnrecoverableError)
from .kernels import InputError
from .rng import random_matrix
from .verify import compare_runs, metrics, oracle_qr

REPORT_KEYS = ("backward_error", "orthogonality", "triangularity",
               "max_diff", "exchanges", "sends", "bytes_total",
               "redundancy_by_step", "recoveries")

VERIFY_TOL = 1e-12


class UsageError(Exception):
    pass


def parse_fault(spec):
    try:
        rank_part, rest = spec.split("@", 1)
        phase, panel, step, point = rest.split(":", 3)
        event = KillEvent(rank=int(rank_part), panel=int(panel), phase=phase,
                          step=int(step), point=point)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad fault spec {spec!r}: expected "
                         f"RANK@PHASE:PANEL:STEP:POINT") from exc
    if event.phase not in PHASES:
        raise UsageError(f"bad fault spec {spec!r}: phase must be one of "
                         f"{'/'.join(PHASES)}")
    if event.point not in POINTS:
        raise UsageError(f"bad fault spec {spec!r}: point must be one of "
                         f"{'/'.join(POINTS)}")
    return event


def load_matrix(args):
    if args.input:
        data = np.fromfile(args.input, dtype="<f8")
        if data.size != args.rows * args.cols:
            raise UsageError(
                f"{args.input}: holds {data.size} values, expected "
                f"{args.rows}x{args.cols}")
        return data.reshape(args.rows, args.cols)
    return random_matrix(args.rows, args.cols, args.seed)


def build_distribution(args):
    return Distribution.even(args.rows, args.cols, args.panel, args.ranks)


def format_report(report):
    lines = []
    mets = report.metrics
    for key in REPORT_KEYS:
        if key in ("backward_error", "orthogonality", "triangularity",
                   "max_diff"):
            value = repr(getattr(mets, key)) if mets is not None else "-"
        elif key == "redundancy_by_step":
            value = (",".join(str(c) for c in report.redundancy_by_step)
                     or "-")
        elif key == "recoveries":
            value = (";".join(
                f"{r['rank']}@{r['phase']}:{r['panel']}:{r['step']}"
                f"->{r['peer']}" for r in report.recoveries) or "-")
        else:
            value = str(getattr(report, key))
        lines.append(f"{key} {value}")
    return "\n".join(lines) + "\n"


def emit_outputs(args, result):
    if args.trace:
        result.outcome.write_trace(args.trace)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(format_report(result.report))


def run_factorization(args):
    A = load_matrix(args)
    dist = build_distribution(args)
    plan = FaultPlan.of([parse_fault(s) for s in args.fault or []])
    result = factor(A, dist, mode=args.mode, variant=args.variant, plan=plan)
    Q = reconstruct_q(result, dist)
    mets = metrics(A, Q, result.R)
    _, oracle_R = oracle_qr(A)
    result.report.metrics = type(mets)(
        backward_error=mets.backward_error,
        orthogonality=mets.orthogonality,
        triangularity=mets.triangularity,
        max_diff=compare_runs(result.R, oracle_R))
    return A, dist, result


def cmd_factor(args):
    _, _, result = run_factorization(args)
    emit_outputs(args, result)
    sys.stdout.write(format_report(result.report))
    sys.stdout.write(f"elapsed {result.report.elapsed:.3f}s\n")
    return 0


def cmd_inject(args):
    if not args.fault:
        raise UsageError("inject requires at least one --fault")
    _, _, result = run_factorization(args)
    emit_outputs(args, result)
    sys.stdout.write(format_report(result.report))
    for rec in result.report.recoveries:
        sys.stdout.write(
            f"recovered rank {rec['rank']} at panel {rec['panel']} "
            f"{rec['phase']} step {rec['step']} from peer {rec['peer']}\n")
    return 0


def cmd_verify(args):
    _, _, result = run_factorization(args)
    emit_outputs(args, result)
    sys.stdout.write(format_report(result.report))
    mets = result.report.metrics
    bad = (mets.backward_error > VERIFY_TOL
           or mets.orthogonality > VERIFY_TOL
           or mets.max_diff > VERIFY_TOL)
    sys.stdout.write(f"verdict {'FAIL' if bad else 'PASS'}\n")
    return 1 if bad else 0


def cmd_sweep(args):
    A = load_matrix(args)
    dist = build_distribution(args)
    _, rows = run_sweep(A, dist, variant=args.variant)
    by_point = {}
    ranks = sorted({row.point[0] for row in rows})
    for row in rows:
        rank, panel, phase, step, point = row.point
        key = (panel, phase, step, point)
        by_point.setdefault(key, {})[rank] = row
    header = "panel phase    step point           " + " ".join(
        f"r{r}" for r in ranks)
    sys.stdout.write(header + "\n")
    for key in sorted(by_point, key=lambda k: (k[0], PHASES.index(k[1]),
                                               k[2], POINTS.index(k[3]))):
        panel, phase, step, point = key
        cells = []
        for r in ranks:
            row = by_point[key].get(r)
            cells.append("--" if row is None else ("ok" if row.ok else "XX"))
        sys.stdout.write(f"{panel:5d} {phase:8s} {step:4d} {point:15s} "
                         + " ".join(cells) + "\n")
    failures = [row for row in rows if not row.ok]
    sys.stdout.write(f"injections {len(rows)} failures {len(failures)}\n")
    for row in failures:
        sys.stdout.write(f"FAIL {row.point}: {row.detail}\n")
    return 1 if failures else 0


def cmd_trace(args):
    if not args.trace:
        raise UsageError("trace requires --trace PATH")
    _, _, result = run_factorization(args)
    emit_outputs(args, result)
    sys.stdout.write(f"wrote {len(result.outcome.trace)} events to "
                     f"{args.trace}\n")
    return 0


COMMANDS = {
    "factor": cmd_factor,
    "inject": cmd_inject,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "trace": cmd_trace,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ftqr",
        description="fault-tolerant distributed QR on a simulated fabric")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--rows", type=int, required=True)
        p.add_argument("--cols", type=int, required=True)
        p.add_argument("--panel", type=int, default=1)
        p.add_argument("--ranks", type=int, default=2)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--mode", choices=("baseline", "ft"), default="ft")
        p.add_argument("--variant", choices=("literal", "symmetric"),
                       default="symmetric")
        p.add_argument("--fault", action="append", default=[],
                       metavar="RANK@PHASE:PANEL:STEP:POINT")
        p.add_argument("--trace", metavar="PATH")
        p.add_argument("--report", metavar="PATH")
        p.add_argument("--input", metavar="PATH",
                       help="raw row-major float64 matrix file")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except UnrecoverableError as exc:
        sys.stderr.write(f"unrecoverable failure: {exc}\n")
        return 3
    except (ProtocolError, InputError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
