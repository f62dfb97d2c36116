"""Panel factorization over a reduction tree of stacked triangles.

Two variants share the same combine order (lower subgroup's triangle on
top), so they produce bitwise-identical R factors:

  * allreduce: buddies exchange intermediate triangles every step and both
    compute the combine, so the number of ranks holding the same
    intermediate doubles at each step. One EXCHANGE per pair per step,
    (P/2) log2 P total.
  * baseline reduce: the upper-subgroup representative sends its triangle
    to the lower one and stops computing. One SEND per live pair, P - 1
    total for a fully live tree; only the first live rank ends with R.

Ranks with no live rows for the current panel join the allreduce as
mirrors: they forward the live side's triangle and keep the same records
as everyone else, which keeps every rank usable as a recovery source. In
baseline mode they do not participate at all.
"""

from dataclasses import dataclass, field

import numpy as np

from .fabric import PHASE_TSQR, ProtocolError
from .kernels import combine_qr, householder_qr
from .runtime import first_live, subgroup_bounds, tree_steps


def buddy(rank, step, P=None):
    """Pair partner at a tree step: rank XOR 2^step. Involutive."""
    if step < 0:
        raise ProtocolError(f"buddy: step {step} out of range")
    if P is not None and step >= tree_steps(P):
        raise ProtocolError(f"buddy: step {step} out of range for P={P}")
    return rank ^ (1 << step)


@dataclass
class TsqrState:
    """Per-rank retained panel state: leaf factor plus the combine path."""

    leaf: object = None
    rtilde: object = None
    combines: list = field(default_factory=list)   # per step, None = forward
    snapshots: list = field(default_factory=list)  # rtilde after each step
    group_step: int = -1


def tsqr_phase(links, panel, block, live, mode, P):
    """Run one panel's tree on this rank; returns the TsqrState.

    block is the rank's live rows of the panel (None when the rank owns no
    live rows). live is the per-rank liveness list for this panel.
    """
    rank = links.rank
    leaf = None
    if block is not None:
        leaf = householder_qr(block)
        links.compute("leaf_qr", panel, PHASE_TSQR)
    state = TsqrState(leaf=leaf, rtilde=leaf.R if leaf is not None else None)

    if mode == "ft":
        _allreduce(links, panel, state, live, P)
    else:
        _baseline_reduce(links, panel, state, live, P)
    return state


def _allreduce(links, panel, state, live, P):
    rank = links.rank
    for s in range(tree_steps(P)):
        own_in = state.rtilde
        peer_in = links.tsqr_exchange(panel, s, own_in)
        lo_side = ((rank >> s) & 1) == 0
        r_lo, r_hi = (own_in, peer_in) if lo_side else (peer_in, own_in)
        if r_lo is None or r_hi is None:
            cf = None
            state.rtilde = r_lo if r_hi is None else r_hi
        else:
            cf = combine_qr(r_lo, r_hi)
            state.rtilde = cf.Rout
            links.compute("combine", panel, PHASE_TSQR, step=s)
        state.combines.append(cf)
        state.snapshots.append(state.rtilde)
        state.group_step = s
        links.record_tsqr(panel, s, own_in, peer_in, cf)


def _baseline_reduce(links, panel, state, live, P):
    rank = links.rank
    rep = live[rank]
    for s in range(tree_steps(P)):
        if not rep:
            state.combines.append(None)
            state.snapshots.append(None)
            continue
        base, mid, top = subgroup_bounds(rank, s)
        lo_rep = first_live(live, base, mid)
        hi_rep = first_live(live, mid, top)
        if lo_rep is None or hi_rep is None:
            # One side holds nothing; the live representative carries on.
            state.combines.append(None)
            state.snapshots.append(state.rtilde)
            continue
        if rank == hi_rep:
            links.checkpoint(panel, PHASE_TSQR, s, "BEFORE_EXCHANGE")
            links.baseline_send(lo_rep, "rtilde", state.rtilde,
                                panel, PHASE_TSQR, s)
            links.checkpoint(panel, PHASE_TSQR, s, "AFTER_EXCHANGE")
            rep = False
            state.combines.append(None)
            state.snapshots.append(state.rtilde)
        else:
            # Live sets are rank suffixes, so a surviving representative is
            # always the first live member of its side.
            assert rank == lo_rep
            links.checkpoint(panel, PHASE_TSQR, s, "BEFORE_EXCHANGE")
            peer_in = links.baseline_recv(hi_rep, "rtilde",
                                          panel, PHASE_TSQR, s)
            links.checkpoint(panel, PHASE_TSQR, s, "AFTER_EXCHANGE")
            cf = combine_qr(state.rtilde, peer_in)
            state.rtilde = cf.Rout
            links.compute("combine", panel, PHASE_TSQR, step=s)
            state.combines.append(cf)
            state.snapshots.append(state.rtilde)
        state.group_step = s


def tsqr_allreduce(blocks, plan=None, mode="ft"):
    """Standalone panel factorization of vertically stacked blocks.

    blocks: one m_i x n block per rank, every m_i >= n. Returns
    (per-rank list of (R, TsqrState), Outcome). In allreduce mode every
    rank ends with the same R bitwise; in baseline mode only rank 0's R is
    meaningful.
    """
    from .driver import Distribution, factor

    P = len(blocks)
    n = blocks[0].shape[1]
    for i, blk in enumerate(blocks):
        if blk.shape[1] != n:
            raise ProtocolError(f"block {i}: inconsistent column count")
        if blk.shape[0] < n:
            raise ProtocolError(f"block {i}: needs at least {n} rows")
    bounds = np.cumsum([0] + [blk.shape[0] for blk in blocks])
    dist = Distribution(P=P, m=int(bounds[-1]), n=n, b=n,
                        row_blocks=tuple((int(bounds[i]), int(bounds[i + 1]))
                                         for i in range(P)))
    result = factor(np.vstack(blocks), dist, mode=mode, plan=plan)
    per_rank = []
    for res in result.rank_results:
        arch = res.archive
        steps = tree_steps(P)
        state = TsqrState(leaf=arch.leafs.get(0),
                          rtilde=arch.panel_R.get(0),
                          combines=arch.combines.get(0, []),
                          snapshots=arch.snapshots.get(0, []),
                          group_step=steps - 1)
        per_rank.append((arch.panel_R.get(0), state))
    return per_rank, result.outcome
