"""Per-rank execution machinery shared by the TSQR and trailing phases.

A run advances through a fixed sequence of progress units, one per
(panel, phase, step). Each rank retains per-unit redundancy records in a
RankArchive published to the fabric; the archive's cursor counts completed
units. A replacement process fetches one surviving buddy's archive, replays
every unit before its predecessor's death point from that bundle (no
communication), and rejoins the live protocol at the death point.

The step-0 buddy (rank XOR 1) is the uniform recovery source: it sits in
the same subgroup as the failed rank at every tree level, so its records
are bitwise-identical to what the failed rank held, and at step 0 it was
the pair peer itself.
"""

from dataclasses import dataclass, field

from .fabric import (AFTER_EXCHANGE, BEFORE_EXCHANGE, FailedPeerError,
                     PHASE_TRAILING, PHASE_TSQR, UnrecoverableError,
                     payload_nbytes)


def tree_steps(P):
    return P.bit_length() - 1


def first_live(live, start, stop):
    """First rank in [start, stop) holding live rows, or None."""
    for r in range(start, stop):
        if live[r]:
            return r
    return None


def subgroup_bounds(rank, step):
    """(base, mid, top) of the step-level supergroup containing rank."""
    base = (rank >> (step + 1)) << (step + 1)
    mid = base + (1 << step)
    return base, mid, base + (1 << (step + 1))


class UnitTable:
    """Fixed global ordering of (panel, phase, step) progress units."""

    def __init__(self, n_panels, steps, trailing_width):
        self.units = []
        for k in range(n_panels):
            for s in range(steps):
                self.units.append((k, PHASE_TSQR, s))
            if trailing_width(k) > 0:
                for s in range(steps):
                    self.units.append((k, PHASE_TRAILING, s))
        self.index = {u: i for i, u in enumerate(self.units)}

    def __len__(self):
        return len(self.units)

    def ordinal(self, panel, phase, step):
        return self.index[(panel, phase, step)]

    def resume_ordinal(self, death_point):
        """First unit the replacement must execute live."""
        panel, phase, step, point = death_point
        ord_ = self.ordinal(panel, phase, step)
        return ord_ + 1 if point == AFTER_EXCHANGE else ord_


@dataclass
class TsqrRecord:
    own_in: object      # my rtilde entering the step (None for empty leaves)
    peer_in: object     # rtilde received from the step buddy
    cf: object          # CombineFactor, or None at forward steps


@dataclass
class RankArchive:
    """Retained redundancy data, published for one-sided recovery reads."""

    tsqr: dict = field(default_factory=dict)       # (panel, step) -> TsqrRecord
    ledgers: dict = field(default_factory=dict)    # (panel, step) -> Ledger
    leafs: dict = field(default_factory=dict)      # panel -> QRFactor | None
    combines: dict = field(default_factory=dict)   # panel -> [cf per step]
    snapshots: dict = field(default_factory=dict)  # panel -> [rtilde per step]
    panel_R: dict = field(default_factory=dict)    # panel -> final triangle
    cursor: int = 0
    _unit_bytes: list = field(default_factory=list)

    def _advance(self, nbytes):
        self._unit_bytes.append(nbytes)
        self.cursor += 1

    def add_tsqr(self, panel, step, record):
        self.tsqr[(panel, step)] = record
        self._advance(payload_nbytes(record.own_in)
                      + payload_nbytes(record.peer_in))

    def add_ledger(self, panel, step, entry):
        self.ledgers[(panel, step)] = entry
        self._advance(entry.nbytes())

    def nbytes_upto(self, cursor):
        return sum(self._unit_bytes[:min(cursor, len(self._unit_bytes))])


class Links:
    """Exchange policy for one rank: live protocol, or bundle replay.

    Fresh processes run every unit live. A replacement sets a resume
    ordinal after fetching the recovery bundle: units before it are
    answered from the bundle without touching the network, units at or
    after it go through the fabric as usual. FailedPeerError on the live
    path triggers REBUILD of the dead peer and a retry; the replacement
    finds the retried exchange waiting once its replay reaches that unit.
    """

    def __init__(self, ctx, table, archive, mode):
        self.ctx = ctx
        self.table = table
        self.archive = archive
        self.mode = mode
        self.resume = 0
        self.bundle = None

    @property
    def rank(self):
        return self.ctx.rank

    def begin_recovery(self):
        death = self.ctx.death_point
        if death is None:
            raise UnrecoverableError("respawned process has no death point")
        self.resume = self.table.resume_ordinal(death)
        peer = self.ctx.rank ^ 1
        self.bundle = self.ctx.fetch_state(
            peer, self.resume, panel=death[0], phase=death[1], step=death[2])
        return peer

    def replaying(self, panel, phase, step):
        return self.table.ordinal(panel, phase, step) < self.resume

    # -- fault-tolerant path --------------------------------------------

    def _retrying_sendrecv(self, peer, tag, payload, panel, phase, step):
        while True:
            try:
                return self.ctx.sendrecv(peer, tag, payload, panel=panel,
                                         phase=phase, step=step)
            except FailedPeerError:
                if self.ctx.is_failed(peer):
                    self.ctx.respawn(peer)
                # else: another observer already rebuilt it; just retry.

    def tsqr_exchange(self, panel, step, rtilde):
        if self.replaying(panel, PHASE_TSQR, step):
            rec = self.bundle.tsqr[(panel, step)]
            # At step 0 the bundle source was the pair peer itself.
            return rec.own_in if step == 0 else rec.peer_in
        peer = self.ctx.rank ^ (1 << step)
        self.ctx.checkpoint(panel, PHASE_TSQR, step, BEFORE_EXCHANGE)
        got = self._retrying_sendrecv(peer, "rtilde", rtilde,
                                      panel, PHASE_TSQR, step)
        self.ctx.checkpoint(panel, PHASE_TSQR, step, AFTER_EXCHANGE)
        return got

    def trailing_exchange(self, panel, step, payload):
        """Returns ((peer_carry, peer_y), replayed)."""
        if self.replaying(panel, PHASE_TRAILING, step):
            led = self.bundle.ledgers[(panel, step)]
            peer_carry = led.own_Cprime if step == 0 else led.peer_Cprime
            return (peer_carry, None), True
        peer = self.ctx.rank ^ (1 << step)
        self.ctx.checkpoint(panel, PHASE_TRAILING, step, BEFORE_EXCHANGE)
        got = self._retrying_sendrecv(peer, "cprime", payload,
                                      panel, PHASE_TRAILING, step)
        self.ctx.checkpoint(panel, PHASE_TRAILING, step, AFTER_EXCHANGE)
        return got, False

    def record_tsqr(self, panel, step, own_in, peer_in, cf):
        if self.mode == "ft":
            self.archive.add_tsqr(panel, step, TsqrRecord(own_in, peer_in, cf))

    def record_ledger(self, panel, step, entry):
        if self.mode == "ft":
            self.archive.add_ledger(panel, step, entry)

    # -- baseline path (no redundancy, failures are fatal) ---------------

    def baseline_send(self, dst, tag, payload, panel, phase, step):
        try:
            self.ctx.send(dst, tag, payload, panel=panel, phase=phase,
                          step=step)
        except FailedPeerError as exc:
            raise UnrecoverableError(
                f"rank {self.rank}: peer {exc.peer} failed; baseline mode "
                f"has no redundancy to recover from") from exc

    def baseline_recv(self, src, tag, panel, phase, step):
        try:
            return self.ctx.recv(src, tag, panel=panel, phase=phase,
                                 step=step)
        except FailedPeerError as exc:
            raise UnrecoverableError(
                f"rank {self.rank}: peer {exc.peer} failed; baseline mode "
                f"has no redundancy to recover from") from exc

    def checkpoint(self, panel, phase, step, point):
        self.ctx.checkpoint(panel, phase, step, point)

    def compute(self, tag, panel, phase, step=None, nbytes=0):
        self.ctx.compute(tag, panel=panel, phase=phase, step=step,
                         nbytes=nbytes)
