"""Reduction-tree tests: redundancy doubling, counts, oracle R, recovery."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftqr.fabric import FaultPlan, KillEvent, ProtocolError
from ftqr.rng import random_matrix
from ftqr.tsqr import buddy, tsqr_allreduce
from ftqr.verify import compare_runs, oracle_qr


def split_rows(A, P):
    rows = A.shape[0] // P
    return [A[i * rows:(i + 1) * rows].copy() for i in range(P)]


# -- buddy -------------------------------------------------------------------


def test_buddy_first_step_pairs():
    assert buddy(0, 0) == 1
    assert buddy(2, 0) == 3


def test_buddy_second_step_pairs():
    assert buddy(0, 1) == 2
    assert buddy(1, 1) == 3


@given(st.integers(min_value=0, max_value=15),
       st.integers(min_value=0, max_value=3))
def test_buddy_involutive(rank, step):
    assert buddy(buddy(rank, step), step) == rank
    assert buddy(rank, step) != rank


def test_buddy_step_out_of_range():
    with pytest.raises(ProtocolError):
        buddy(0, -1)
    with pytest.raises(ProtocolError):
        buddy(0, 2, P=4)


# -- allreduce ---------------------------------------------------------------


def test_single_rank_degenerate_tree():
    A = random_matrix(6, 3, seed=201)
    per_rank, outcome = tsqr_allreduce([A])
    R, state = per_rank[0]
    assert compare_runs(R, oracle_qr(A)[1]) <= 1e-13
    assert not [ev for ev in outcome.trace
                if ev.kind in ("SEND", "EXCHANGE")]


def test_four_ranks_agree_bitwise_and_match_oracle():
    A = random_matrix(8, 2, seed=203)
    per_rank, _ = tsqr_allreduce(split_rows(A, 4))
    rs = [r.tobytes() for r, _ in per_rank]
    assert len(set(rs)) == 1
    assert compare_runs(per_rank[0][0], oracle_qr(A)[1]) <= 1e-13


def test_four_ranks_exchange_counts_per_step():
    A = random_matrix(16, 4, seed=205)
    _, outcome = tsqr_allreduce(split_rows(A, 4))
    ex = [ev for ev in outcome.trace if ev.kind == "EXCHANGE"]
    assert len(ex) == 4  # (P/2) log2 P
    assert sum(1 for ev in ex if ev.step == 0) == 2
    assert sum(1 for ev in ex if ev.step == 1) == 2


@pytest.mark.parametrize("P", [2, 4, 8])
def test_message_count_closed_form(P):
    n = 3
    A = random_matrix(P * n, n, seed=207 + P)
    _, outcome = tsqr_allreduce(split_rows(A, P))
    ex = [ev for ev in outcome.trace if ev.kind == "EXCHANGE"]
    assert len(ex) == (P // 2) * P.bit_length() - (P // 2)


@pytest.mark.parametrize("P", [2, 4, 8, 16])
def test_redundancy_doubles_each_step(P):
    n = 3
    A = random_matrix(P * n, n, seed=209 + P)
    per_rank, _ = tsqr_allreduce(split_rows(A, P))
    steps = P.bit_length() - 1
    for s in range(steps):
        group = 1 << (s + 1)
        for base in range(0, P, group):
            snaps = [per_rank[r][1].snapshots[s].tobytes()
                     for r in range(base, base + group)]
            assert len(set(snaps)) == 1, (s, base)
    # Across different groups the intermediates differ until the root.
    if steps > 1:
        assert (per_rank[0][1].snapshots[0].tobytes()
                != per_rank[2][1].snapshots[0].tobytes())


@pytest.mark.parametrize("P", [2, 4, 8])
def test_baseline_reduce_send_count_and_root(P):
    n = 3
    A = random_matrix(P * n, n, seed=211 + P)
    per_rank, outcome = tsqr_allreduce(split_rows(A, P), mode="baseline")
    sends = [ev for ev in outcome.trace if ev.kind == "SEND"]
    assert len(sends) == P - 1
    assert not [ev for ev in outcome.trace if ev.kind == "EXCHANGE"]
    assert compare_runs(per_rank[0][0], oracle_qr(A)[1]) <= 1e-13


def test_ft_and_baseline_roots_bitwise_equal():
    A = random_matrix(24, 3, seed=213)
    ft, _ = tsqr_allreduce(split_rows(A, 8))
    base, _ = tsqr_allreduce(split_rows(A, 8), mode="baseline")
    assert ft[0][0].tobytes() == base[0][0].tobytes()


def test_leaf_and_combine_path_retained():
    A = random_matrix(8, 2, seed=215)
    per_rank, _ = tsqr_allreduce(split_rows(A, 4))
    for rank, (_, state) in enumerate(per_rank):
        assert state.leaf is not None
        assert len(state.combines) == 2
        assert all(cf is not None for cf in state.combines)


def test_uneven_blocks_supported():
    A = random_matrix(11, 2, seed=217)
    blocks = [A[:2], A[2:5], A[5:8], A[8:11]]
    per_rank, _ = tsqr_allreduce([b.copy() for b in blocks])
    assert compare_runs(per_rank[0][0], oracle_qr(A)[1]) <= 1e-13


def test_block_with_too_few_rows_rejected():
    with pytest.raises(ProtocolError):
        tsqr_allreduce([np.ones((1, 2)), np.ones((3, 2))])


# -- recovery ----------------------------------------------------------------


def reference_run(A, P):
    per_rank, outcome = tsqr_allreduce(split_rows(A, P))
    return per_rank[0][0].tobytes(), outcome


@pytest.mark.parametrize("point", ["BEFORE_EXCHANGE", "AFTER_EXCHANGE"])
@pytest.mark.parametrize("step", [0, 1])
@pytest.mark.parametrize("rank", [0, 1, 2, 3])
def test_single_failure_recovery_bitwise(rank, step, point):
    A = random_matrix(12, 3, seed=219)
    ref_bytes, _ = reference_run(A, 4)
    plan = FaultPlan.of([KillEvent(rank=rank, panel=0, phase="TSQR",
                                   step=step, point=point)])
    per_rank, outcome = tsqr_allreduce(split_rows(A, 4), plan=plan)
    for r, (R, _) in enumerate(per_rank):
        assert R.tobytes() == ref_bytes, f"rank {r} diverged"
    recovers = [ev for ev in outcome.trace if ev.kind == "RECOVER"]
    assert len(recovers) == 1
    assert recovers[0].rank == rank
    assert recovers[0].peer is not None and recovers[0].peer != rank
    assert [ev.kind for ev in outcome.trace].count("FAIL") == 1


def test_recovery_peer_is_single_source():
    A = random_matrix(12, 3, seed=221)
    plan = FaultPlan.of([KillEvent(rank=1, panel=0, phase="TSQR", step=1,
                                   point="BEFORE_EXCHANGE")])
    _, outcome = tsqr_allreduce(split_rows(A, 4), plan=plan)
    recovers = [ev for ev in outcome.trace if ev.kind == "RECOVER"]
    assert len(recovers) == 1
    assert recovers[0].peer == 0  # step-0 buddy serves the bundle


def test_step0_before_kill_recovers_without_history():
    A = random_matrix(12, 3, seed=223)
    ref_bytes, _ = reference_run(A, 4)
    plan = FaultPlan.of([KillEvent(rank=2, panel=0, phase="TSQR", step=0,
                                   point="BEFORE_EXCHANGE")])
    per_rank, outcome = tsqr_allreduce(split_rows(A, 4), plan=plan)
    assert per_rank[2][0].tobytes() == ref_bytes
    recovers = [ev for ev in outcome.trace if ev.kind == "RECOVER"]
    # Leaf recomputation plus a cursor-0 fetch: nothing flows in the bundle.
    assert recovers[0].bytes == 0
