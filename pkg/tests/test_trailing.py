"""Trailing update: split semantics, message patterns, ledgers, recovery."""

import numpy as np
import pytest

from ftqr.driver import Distribution, factor
from ftqr.fabric import PHASE_TRAILING
from ftqr.kernels import apply_qt, combine_qr, householder_qr
from ftqr.rng import random_matrix
from ftqr.trailing import (Ledger, Packet, leaf_update, recovery_packet,
                           trailing_recover)
from ftqr.verify import oracle_qr


# -- leaf_update -------------------------------------------------------------


def test_leaf_update_identity_factor_is_plain_split():
    leaf = householder_qr(np.eye(5, 2))
    assert np.all(leaf.tau == 0.0)
    C = random_matrix(5, 3, seed=301)
    tb = leaf_update(leaf, C)
    assert np.array_equal(tb.Cprime, C[:2])
    assert np.array_equal(tb.Cdoubleprime, C[2:])


def test_leaf_update_no_second_part():
    leaf = householder_qr(random_matrix(3, 3, seed=303))
    C = random_matrix(3, 2, seed=305)
    tb = leaf_update(leaf, C)
    assert tb.Cdoubleprime.shape == (0, 2)
    assert np.abs(np.vstack([tb.Cprime]) - apply_qt(leaf, C)).max() == 0.0


def test_leaf_update_matches_qt():
    leaf = householder_qr(random_matrix(7, 2, seed=307))
    C = random_matrix(7, 4, seed=309)
    tb = leaf_update(leaf, C)
    full = apply_qt(leaf, C)
    assert np.array_equal(np.vstack([tb.Cprime, tb.Cdoubleprime]), full)


# -- packets -----------------------------------------------------------------


def _entry(seed, with_y=True, lo_side=True):
    b, k = 3, 4
    Ra = np.triu(random_matrix(b, b, seed=seed))
    Rb = np.triu(random_matrix(b, b, seed=seed + 1))
    cf = combine_qr(Ra, Rb)
    own = random_matrix(b, k, seed=seed + 2)
    peer = random_matrix(b, k, seed=seed + 3)
    W = cf.T.T @ ((own if lo_side else peer) + cf.Y1.T
                  @ (peer if lo_side else own))
    return Ledger(W=W, T=cf.T, own_Cprime=own, peer_Cprime=peer,
                  peer_Y=cf.Y1 if with_y else None, chat=None,
                  lo_side=lo_side), cf


def test_packet_with_y_for_upper_slot_buddy():
    entry, cf = _entry(seed=311, with_y=True, lo_side=True)
    packet = recovery_packet(entry, failed=1)
    assert packet.Y is not None
    rebuilt = trailing_recover(packet)
    expect = entry.peer_Cprime - cf.Y1 @ entry.W
    assert np.array_equal(rebuilt, expect)


def test_packet_without_y_for_lower_slot_buddy():
    entry, _ = _entry(seed=317, lo_side=False)
    packet = recovery_packet(entry, failed=0)
    assert packet.Y is None  # lower-slot update needs no reflector block
    rebuilt = trailing_recover(packet)
    assert np.array_equal(rebuilt, entry.peer_Cprime - entry.W)


def test_zero_w_packet_returns_cprime():
    c = random_matrix(3, 2, seed=323)
    packet = Packet(W=np.zeros((3, 2)), T=None, cprime=c, Y=None)
    assert np.array_equal(trailing_recover(packet), c)


def test_packet_nbytes_is_member_sum():
    entry, _ = _entry(seed=329)
    packet = recovery_packet(entry, failed=1)
    expect = 8 * (packet.W.size + packet.T.size + packet.cprime.size
                  + packet.Y.size)
    assert packet.nbytes() == expect


def test_missing_ledger_entry_is_protocol_error():
    from ftqr.fabric import ProtocolError
    with pytest.raises(ProtocolError):
        recovery_packet(None, failed=3)


# -- tree behavior through the driver ---------------------------------------


def two_panel_setup(seed=331, m=32, n=8, b=4, P=4):
    A = random_matrix(m, n, seed=seed)
    dist = Distribution.even(m, n, b, P)
    return A, dist


def trailing_events(trace, panel, step, kinds):
    return [ev for ev in trace
            if ev.kind in kinds and ev.phase == PHASE_TRAILING
            and ev.panel == panel and ev.step == step]


def test_ft_one_exchange_no_w_message_per_pair_step():
    A, dist = two_panel_setup()
    res = factor(A, dist, mode="ft")
    for step in (0, 1):
        ex = trailing_events(res.outcome.trace, 0, step, ("EXCHANGE",))
        sends = trailing_events(res.outcome.trace, 0, step, ("SEND",))
        assert len(ex) == dist.P // 2
        assert not sends


def test_baseline_two_sends_per_pair_step():
    A, dist = two_panel_setup()
    res = factor(A, dist, mode="baseline")
    # Step 0: two live pairs -> 4 sends; step 1: one live pair -> 2 sends.
    assert len(trailing_events(res.outcome.trace, 0, 0, ("SEND",))) == 4
    assert len(trailing_events(res.outcome.trace, 0, 1, ("SEND",))) == 2
    assert not trailing_events(res.outcome.trace, 0, 0, ("EXCHANGE",))
    tags = [ev.payload_tag for ev in
            trailing_events(res.outcome.trace, 0, 0, ("SEND",))]
    assert sorted(set(tags)) == ["cprime", "w"]


def test_baseline_active_ranks_halve():
    A, dist = two_panel_setup()
    res = factor(A, dist, mode="baseline")
    active = []
    for step in (0, 1):
        evs = trailing_events(res.outcome.trace, 0, step,
                              ("SEND", "RECV", "COMPUTE"))
        ranks = {ev.rank for ev in evs}
        active.append(len(ranks))
    assert active == [4, 2]


def test_ft_all_ranks_active_every_step():
    A, dist = two_panel_setup()
    res = factor(A, dist, mode="ft")
    for panel in range(dist.panels - 1):
        for step in (0, 1):
            evs = trailing_events(res.outcome.trace, panel, step,
                                  ("EXCHANGE",))
            ranks = {ev.rank for ev in evs} | {ev.peer for ev in evs}
            assert len(ranks) == dist.P, (panel, step)


def test_ft_baseline_bitwise_identical_results():
    A, dist = two_panel_setup()
    ft = factor(A, dist, mode="ft")
    base = factor(A, dist, mode="baseline")
    assert ft.R.tobytes() == base.R.tobytes()
    for a, b in zip(ft.images, base.images):
        assert a.tobytes() == b.tobytes()


def test_variants_bitwise_identical_results():
    A, dist = two_panel_setup()
    sym = factor(A, dist, mode="ft", variant="symmetric")
    lit = factor(A, dist, mode="ft", variant="literal")
    assert sym.R.tobytes() == lit.R.tobytes()
    for a, b in zip(sym.images, lit.images):
        assert a.tobytes() == b.tobytes()


def test_variant_byte_footprints_differ():
    A, dist = two_panel_setup()
    sym = factor(A, dist, mode="ft", variant="symmetric")
    lit = factor(A, dist, mode="ft", variant="literal")
    assert sym.report.bytes_total > lit.report.bytes_total


def test_first_panel_r12_matches_oracle_update():
    # The finished top rows of the first panel's trailing columns must
    # equal the dense oracle's thin Q^T applied to them, up to the row
    # signs the two routes chose for R's diagonal.
    m, b, k = 16, 4, 4
    A = random_matrix(m, b + k, seed=333)
    dist = Distribution.even(m, b + k, b, 4)
    res = factor(A, dist, mode="ft")
    stacked = np.vstack(res.images)
    ours = stacked[:b, b:]
    Qp, Rp = oracle_qr(A[:, :b])
    top = Qp.T @ A[:, b:]
    flip = np.where(np.diag(Rp) * np.diag(stacked[:b, :b]) < 0, -1.0, 1.0)
    norm = np.linalg.norm(A[:, b:])
    assert np.abs(flip[:, None] * top - ours).max() <= 1e-13 * max(norm, 1.0)


def test_ledger_sufficiency_rebuilds_buddy():
    A, dist = two_panel_setup()
    res = factor(A, dist, mode="ft", variant="symmetric")
    # For every rank and trailing step of panel 0, the buddy's entry must
    # reproduce the rank's own recorded update bit for bit.
    for rank in range(dist.P):
        for step in (0, 1):
            own = res.rank_results[rank].archive.ledgers[(0, step)]
            bud = rank ^ (1 << step)
            entry = res.rank_results[bud].archive.ledgers[(0, step)]
            packet = recovery_packet(entry, failed=rank)
            rebuilt = trailing_recover(packet)
            if own.chat is None:
                continue
            # The rank's ledger stores its own updated block when one was
            # produced at this step.
            want = own.chat if (own.lo_side is not entry.lo_side) else None
            assert want is not None
            assert rebuilt.tobytes() == own.chat.tobytes(), (rank, step)
