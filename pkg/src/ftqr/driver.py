"""Right-looking factorization loop: panel tree, trailing update, recurse.

Layout is a one-dimensional row-block distribution with column panels of
width b. Every panel runs a full-height tree over the ranks owning live
rows; ranks whose rows are all finished join fault-tolerant trees as
mirrors and skip baseline trees. Panel k finishes rows [k b, (k+1) b): the
rank owning the diagonal block writes R11 there, every finalized C' block
lands in its owner's top live rows, so at the end each rank's local image
holds its rows of [R; 0] and the global R is simply the first n assembled
rows.

Recovery: a killed rank is rebuilt with the same rank, reloads its durable
input block, pulls one buddy's retained archive in a single fetch and
replays deterministically up to the death point, then rejoins the live
protocol. Fault-free and recovered runs produce bit-identical results.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import fabric
from .fabric import (FaultPlan, PHASE_TRAILING, ProtocolError,
                     UnrecoverableError)
from .kernels import as_matrix, apply_q
from .runtime import Links, RankArchive, UnitTable, first_live, tree_steps
from .trailing import leaf_update, trailing_phase_baseline, trailing_phase_ft
from .tsqr import tsqr_phase


@dataclass(frozen=True)
class Distribution:
    """Contiguous row ranges per rank for an m x n factorization."""

    P: int
    m: int
    n: int
    b: int
    row_blocks: tuple

    def __post_init__(self):
        self.validate()

    @staticmethod
    def even(m, n, b, P):
        if m % P != 0:
            raise ProtocolError(f"even distribution needs P | m, got {m}/{P}")
        size = m // P
        blocks = tuple((i * size, (i + 1) * size) for i in range(P))
        return Distribution(P=P, m=m, n=n, b=b, row_blocks=blocks)

    def validate(self):
        if self.P < 1 or (self.P & (self.P - 1)) != 0:
            raise ProtocolError(f"P must be a power of two, got {self.P}")
        if not (1 <= self.n <= self.m):
            raise ProtocolError(f"need m >= n >= 1, got {self.m}x{self.n}")
        if self.b < 1 or self.n % self.b != 0:
            raise ProtocolError(f"panel width {self.b} must divide n={self.n}")
        if len(self.row_blocks) != self.P:
            raise ProtocolError("row_blocks must have one range per rank")
        pos = 0
        for lo, hi in self.row_blocks:
            if lo != pos or hi <= lo:
                raise ProtocolError("row_blocks must partition [0, m)")
            pos = hi
        if pos != self.m:
            raise ProtocolError("row_blocks must partition [0, m)")
        for k in range(self.n // self.b):
            for rank in range(self.P):
                sl = self.live_slice(rank, k)
                if sl is not None and sl[1] - sl[0] < self.b:
                    raise ProtocolError(
                        f"rank {rank} holds {sl[1] - sl[0]} live rows at "
                        f"panel {k}; every live block needs >= b = {self.b}")

    @property
    def panels(self):
        return self.n // self.b

    def live_slice(self, rank, panel):
        """Global (start, stop) of the rank's live rows, or None."""
        lo, hi = self.row_blocks[rank]
        start = max(lo, panel * self.b)
        return (start, hi) if hi > start else None

    def live_ranks(self, panel):
        return [self.live_slice(r, panel) is not None for r in range(self.P)]

    def diag_owner(self, panel):
        return first_live(self.live_ranks(panel), 0, self.P)


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "ft"            # "ft" | "baseline"
    variant: str = "symmetric"  # "literal" | "symmetric"

    def __post_init__(self):
        if self.mode not in ("ft", "baseline"):
            raise ProtocolError(f"unknown mode {self.mode!r}")
        if self.variant not in ("literal", "symmetric"):
            raise ProtocolError(f"unknown variant {self.variant!r}")


@dataclass
class RankResult:
    rank: int
    image: np.ndarray
    archive: RankArchive


@dataclass
class RunReport:
    metrics: object = None
    exchanges: int = 0
    sends: int = 0
    bytes_total: int = 0
    redundancy_by_step: tuple = ()
    recoveries: tuple = ()
    elapsed: float = 0.0


@dataclass
class QHistory:
    leafs: dict    # (panel, rank) -> QRFactor
    combines: dict  # (panel, step, node) -> CombineFactor | None


@dataclass
class FactorizationResult:
    R: np.ndarray
    q_history: QHistory
    report: RunReport
    rank_results: list
    outcome: object

    @property
    def images(self):
        return [res.image for res in self.rank_results]


def _unit_table(dist):
    steps = tree_steps(dist.P)
    return UnitTable(dist.panels, steps,
                     lambda k: dist.n - (k + 1) * dist.b)


def _make_program(blocks, dist, cfg, table):
    def program(ctx):
        rank = ctx.rank
        archive = RankArchive()
        ctx.publish_state(archive)
        links = Links(ctx, table, archive, cfg.mode)
        if ctx.is_respawn:
            if cfg.mode != "ft":
                raise UnrecoverableError(
                    f"rank {rank} failed; baseline mode cannot recover")
            links.begin_recovery()
        # Durable input: the replacement reloads its original block.
        image = blocks[rank].copy()
        lo, _hi = dist.row_blocks[rank]
        for k in range(dist.panels):
            live = dist.live_ranks(k)
            sl = dist.live_slice(rank, k)
            c0, c1 = k * dist.b, (k + 1) * dist.b
            pblock = None
            if sl is not None:
                l0, l1 = sl[0] - lo, sl[1] - lo
                pblock = image[l0:l1, c0:c1].copy()
            state = tsqr_phase(links, k, pblock, live, cfg.mode, dist.P)
            archive.leafs[k] = state.leaf
            archive.combines[k] = state.combines
            archive.snapshots[k] = state.snapshots
            archive.panel_R[k] = state.rtilde
            if sl is not None:
                image[l0:l1, c0:c1] = 0.0
                if rank == dist.diag_owner(k):
                    image[l0:l0 + dist.b, c0:c1] = state.rtilde
            if c1 < dist.n:
                carry = None
                if sl is not None:
                    tb = leaf_update(state.leaf, image[l0:l1, c1:dist.n])
                    links.compute("leaf_update", k, PHASE_TRAILING)
                    image[l0 + dist.b:l1, c1:dist.n] = tb.Cdoubleprime
                    carry = tb.Cprime
                if cfg.mode == "ft":
                    own_final, _root = trailing_phase_ft(
                        links, k, carry, state.combines, live, cfg.variant,
                        dist.P)
                else:
                    own_final, _root = trailing_phase_baseline(
                        links, k, carry, state.combines, live, dist.P)
                if own_final is not None:
                    image[l0:l0 + dist.b, c1:dist.n] = own_final
        return RankResult(rank=rank, image=image, archive=archive)

    return program


def _report_from_trace(trace, snapshots_by_rank, P):
    exchanges = sum(1 for ev in trace if ev.kind == "EXCHANGE")
    sends = sum(1 for ev in trace if ev.kind == "SEND")
    bytes_total = sum(ev.bytes for ev in trace
                      if ev.kind in ("SEND", "EXCHANGE", "RECOVER"))
    recoveries = tuple(
        {"rank": ev.rank, "panel": ev.panel, "phase": ev.phase,
         "step": ev.step, "peer": ev.peer}
        for ev in trace if ev.kind == "RECOVER")
    return RunReport(exchanges=exchanges, sends=sends,
                     bytes_total=bytes_total,
                     redundancy_by_step=redundancy_by_step(
                         snapshots_by_rank, P),
                     recoveries=recoveries)


def redundancy_by_step(snapshots_by_rank, P):
    """Per tree step, the smallest count of ranks sharing identical
    intermediate triangles within any nominal group of size 2^(s+1)."""
    if not snapshots_by_rank or snapshots_by_rank[0] is None:
        return ()
    steps = len(snapshots_by_rank[0])
    counts = []
    for s in range(steps):
        group = 1 << (s + 1)
        worst = P
        for base in range(0, P, group):
            vals = [snapshots_by_rank[r][s] for r in range(base, base + group)]
            ref = next((v for v in vals if v is not None), None)
            if ref is None:
                continue
            agree = sum(1 for v in vals
                        if v is not None and v.tobytes() == ref.tobytes())
            worst = min(worst, agree)
        counts.append(worst)
    return tuple(counts)


def factor(A, dist, mode="ft", variant="symmetric", plan=None):
    """Distributed QR of A under the given layout; R plus replay history.

    Failures in the plan are injected and, in ft mode, recovered; a failure
    in baseline mode aborts with UnrecoverableError.
    """
    A = as_matrix(A, "A")
    if A.shape != (dist.m, dist.n):
        raise ProtocolError(
            f"matrix shape {A.shape} does not match distribution "
            f"{(dist.m, dist.n)}")
    cfg = EngineConfig(mode=mode, variant=variant)
    table = _unit_table(dist)
    blocks = [A[lo:hi].copy() for lo, hi in dist.row_blocks]
    start = time.perf_counter()
    outcome = fabric.run(_make_program(blocks, dist, cfg, table), dist.P,
                         plan=plan)
    elapsed = time.perf_counter() - start

    results = outcome.results
    stacked = np.vstack([res.image for res in results])
    R = stacked[:dist.n].copy()

    leafs, combines = {}, {}
    for k in range(dist.panels):
        live = dist.live_ranks(k)
        for rank in range(dist.P):
            if live[rank]:
                leafs[(k, rank)] = results[rank].archive.leafs[k]
        for s in range(tree_steps(dist.P)):
            width = 1 << (s + 1)
            for j in range(dist.P // width):
                rep = first_live(live, j * width, (j + 1) * width)
                cf = None
                if rep is not None:
                    cfs = results[rep].archive.combines.get(k)
                    cf = cfs[s] if cfs else None
                combines[(k, s, j)] = cf

    snaps = [results[r].archive.snapshots.get(0) for r in range(dist.P)]
    report = _report_from_trace(outcome.trace, snaps, dist.P)
    report.elapsed = elapsed
    return FactorizationResult(R=R, q_history=QHistory(leafs, combines),
                               report=report, rank_results=results,
                               outcome=outcome)


def _apply_q_pair(cf, X0, X1):
    """Left-multiply the stacked pair [X0; X1] by the combine factor's Q."""
    z = cf.T @ (X0 + cf.Y1.T @ X1)
    return X0 - z, X1 - cf.Y1 @ z


def reconstruct_q(result, dist):
    """Explicit thin Q from the stored reflector history.

    Applies the per-panel factors to the identity embedding in reverse
    panel order, tree steps before leaves within each panel.
    """
    qh = result.q_history
    M = np.eye(dist.m, dist.n)
    steps = tree_steps(dist.P)
    for k in reversed(range(dist.panels)):
        live = dist.live_ranks(k)
        for s in reversed(range(steps)):
            width = 1 << (s + 1)
            for j in range(dist.P // width):
                cf = qh.combines.get((k, s, j))
                if cf is None:
                    continue
                r_lo = first_live(live, j * width, j * width + (1 << s))
                r_hi = first_live(live, j * width + (1 << s), (j + 1) * width)
                lo0 = dist.live_slice(r_lo, k)[0]
                hi0 = dist.live_slice(r_hi, k)[0]
                X0 = M[lo0:lo0 + dist.b]
                X1 = M[hi0:hi0 + dist.b]
                Z0, Z1 = _apply_q_pair(cf, X0, X1)
                M[lo0:lo0 + dist.b] = Z0
                M[hi0:hi0 + dist.b] = Z1
        for rank in range(dist.P):
            if not live[rank]:
                continue
            leaf = qh.leafs.get((k, rank))
            if leaf is None:
                raise ProtocolError(
                    f"q history incomplete: missing leaf for rank {rank}, "
                    f"panel {k}")
            g0, g1 = dist.live_slice(rank, k)
            M[g0:g1] = apply_q(leaf, M[g0:g1])
    return M


def enumerate_injection_points(outcome):
    """All (rank, panel, phase, step, point) kill points a fault-free trace
    shows the run actually passes through."""
    points = set()
    for ev in outcome.trace:
        if ev.kind != "EXCHANGE":
            continue
        for rank in (ev.rank, ev.peer):
            for point in fabric.POINTS:
                points.add((rank, ev.panel, ev.phase, ev.step, point))
    return sorted(points, key=lambda p: (p[1], fabric.PHASES.index(p[2]),
                                         p[3], p[0], p[4]))


@dataclass
class SweepOutcome:
    point: tuple
    ok: bool
    detail: str = ""


def run_sweep(A, dist, variant="symmetric"):
    """Inject every single-failure point in turn; each recovered run must
    reproduce the fault-free run bit for bit with a one-peer recovery."""
    reference = factor(A, dist, mode="ft", variant=variant)
    ref_R = reference.R.tobytes()
    ref_images = [img.tobytes() for img in reference.images]
    rows = []
    for point in enumerate_injection_points(reference.outcome):
        rank, panel, phase, step, pt = point
        plan = FaultPlan.of([fabric.KillEvent(rank=rank, panel=panel,
                                              phase=phase, step=step,
                                              point=pt)])
        res = factor(A, dist, mode="ft", variant=variant, plan=plan)
        problems = []
        if res.R.tobytes() != ref_R:
            problems.append("R differs")
        if [img.tobytes() for img in res.images] != ref_images:
            problems.append("trailing blocks differ")
        recovers = [ev for ev in res.outcome.trace if ev.kind == "RECOVER"]
        if len(recovers) != 1:
            problems.append(f"{len(recovers)} RECOVER events")
        elif recovers[0].peer is None or recovers[0].rank != rank:
            problems.append("RECOVER event malformed")
        fails = [ev for ev in res.outcome.trace if ev.kind == "FAIL"]
        if len(fails) != 1:
            problems.append(f"{len(fails)} FAIL events")
        rows.append(SweepOutcome(point=point, ok=not problems,
                                 detail="; ".join(problems)))
    return reference, rows
