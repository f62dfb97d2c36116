"""Trailing-matrix update along the panel's reduction tree, with recovery.

After the local leaf update splits a rank's trailing rows into C' (top b
rows, one tree slot) and C'' (final immediately), the C' blocks flow
through the same tree the panel triangles took. At each step the pair
combine factor is applied:

    W     = T^T (C_lo' + Y1^T C_hi')
    C_lo' <- C_lo' - W            continues up the tree
    C_hi' <- C_hi' - Y1 W         final for the upper subgroup's slot

In baseline mode the upper representative ships its C', gets (W, Y1) back,
finalizes its rows and goes idle: active ranks halve every step and each
pair step costs two messages. In fault-tolerant mode the pair trades both
blocks in one exchange and both sides compute everything, so every rank
stays busy every step, per-step cost is one exchange with no W message,
and each rank's per-step Ledger entry is enough to rebuild its buddy.
"""

from dataclasses import dataclass

import numpy as np

from .fabric import PHASE_TRAILING, ProtocolError, payload_nbytes
from .kernels import apply_qt, pair_update
from .runtime import first_live, subgroup_bounds, tree_steps

SENDER = "SENDER"
COMPUTER = "COMPUTER"


@dataclass
class TrailingBlock:
    """A rank's live trailing rows split around the panel width."""

    Cfull: np.ndarray
    Cprime: np.ndarray
    Cdoubleprime: np.ndarray


def leaf_update(leaf, Cfull):
    """Apply the rank's local leaf Q^T and split off the top b rows.

    The bottom part never sees another tree step for this panel.
    """
    D = apply_qt(leaf, Cfull)
    b = leaf.cols
    return TrailingBlock(Cfull=Cfull, Cprime=D[:b].copy(),
                         Cdoubleprime=D[b:].copy())


@dataclass
class Ledger:
    """Per-step retained pair data; one buddy's entry rebuilds the other."""

    W: object
    T: object
    own_Cprime: object
    peer_Cprime: object
    peer_Y: object
    chat: object
    forward: bool = False
    lo_side: bool = True

    def nbytes(self):
        return sum(payload_nbytes(x) for x in
                   (self.W, self.T, self.own_Cprime, self.peer_Cprime,
                    self.peer_Y, self.chat))


@dataclass
class Packet:
    """Everything a replacement needs beyond its durable input block."""

    W: object
    T: object
    cprime: object
    Y: object = None

    def nbytes(self):
        return sum(payload_nbytes(x) for x in (self.W, self.T, self.cprime,
                                               self.Y))


def recovery_packet(entry, failed):
    """Extract the failed buddy's rebuild data from a survivor's entry.

    The packet carries a Y only when the failed rank held the upper slot,
    where the update is C' - Y W; lower-slot updates are C' - W and need
    none.
    """
    if entry is None:
        raise ProtocolError(
            f"no ledger entry covering the failure of rank {failed}")
    y = entry.peer_Y if entry.lo_side else None
    return Packet(W=entry.W, T=entry.T, cprime=entry.peer_Cprime, Y=y)


def trailing_recover(packet):
    """Recompute the failed rank's updated block from a recovery packet."""
    if packet.cprime is None:
        return None
    if packet.W is None:
        return packet.cprime.copy()
    if packet.Y is None:
        return packet.cprime - packet.W
    return packet.cprime - packet.Y @ packet.W


def _sides(rank, step, live):
    base, mid, top = subgroup_bounds(rank, step)
    lo_side = rank < mid
    lo_rep = first_live(live, base, mid)
    hi_rep = first_live(live, mid, top)
    return lo_side, lo_rep, hi_rep


def trailing_phase_ft(links, panel, carry, combines, live, variant, P):
    """Redundant pair updates on every rank at every step.

    Returns (own_final, root_value): own_final is this rank's finished C'
    block (None for ranks with no live rows), root_value the fully reduced
    top block the first live rank ends with.
    """
    rank = links.rank
    own_final = None
    for s in range(tree_steps(P)):
        lo_side, lo_rep, hi_rep = _sides(rank, s, live)
        cf = combines[s]
        ship_y = cf is not None and (variant == "symmetric" or not lo_side)
        payload = (carry, cf.Y1 if ship_y else None)
        (peer_carry, peer_y), replayed = links.trailing_exchange(
            panel, s, payload)
        if replayed and cf is not None:
            # Reconstruct what the peer would have shipped.
            peer_ships = variant == "symmetric" or lo_side
            peer_y = cf.Y1 if peer_ships else None
        if cf is None:
            entry = Ledger(W=None, T=None, own_Cprime=carry,
                           peer_Cprime=peer_carry, peer_Y=None, chat=None,
                           forward=True, lo_side=lo_side)
            if carry is None:
                carry = peer_carry
        else:
            v_lo, v_hi = (carry, peer_carry) if lo_side else (peer_carry,
                                                              carry)
            chat_lo, chat_hi, W = pair_update(v_lo, v_hi, cf)
            links.compute("pair_update", panel, PHASE_TRAILING, step=s)
            own_chat = chat_lo if lo_side else chat_hi
            entry = Ledger(W=W, T=cf.T, own_Cprime=carry,
                           peer_Cprime=peer_carry, peer_Y=peer_y,
                           chat=own_chat, forward=False, lo_side=lo_side)
            if not lo_side and rank == hi_rep:
                own_final = chat_hi
            carry = chat_lo
        links.record_ledger(panel, s, entry)
    if live[rank] and rank == first_live(live, 0, P):
        own_final = carry
    return own_final, carry


def trailing_phase_baseline(links, panel, carry, combines, live, P):
    """Halving tree: upper representatives finalize and go idle each step."""
    rank = links.rank
    if not live[rank]:
        return None, None
    for s in range(tree_steps(P)):
        lo_side, lo_rep, hi_rep = _sides(rank, s, live)
        if lo_rep is None or hi_rep is None:
            continue  # nothing on the other side of this subtree
        if rank == hi_rep:
            links.checkpoint(panel, PHASE_TRAILING, s, "BEFORE_EXCHANGE")
            links.baseline_send(lo_rep, "cprime", carry,
                                panel, PHASE_TRAILING, s)
            W, Y1 = links.baseline_recv(lo_rep, "w", panel, PHASE_TRAILING, s)
            links.checkpoint(panel, PHASE_TRAILING, s, "AFTER_EXCHANGE")
            return carry - Y1 @ W, None  # done with this panel's update
        if rank == lo_rep:
            links.checkpoint(panel, PHASE_TRAILING, s, "BEFORE_EXCHANGE")
            peer_carry = links.baseline_recv(hi_rep, "cprime",
                                             panel, PHASE_TRAILING, s)
            cf = combines[s]
            chat_lo, chat_hi, W = pair_update(carry, peer_carry, cf)
            links.baseline_send(hi_rep, "w", (W, cf.Y1),
                                panel, PHASE_TRAILING, s)
            links.checkpoint(panel, PHASE_TRAILING, s, "AFTER_EXCHANGE")
            links.compute("pair_update", panel, PHASE_TRAILING, step=s)
            carry = chat_lo
        # Live non-representatives finalized at an earlier step.
    return carry, carry
