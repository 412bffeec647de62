import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longvit.attention import PRETRAIN_PAIRS, DilationSchedule, multihead_dilated_attention
from longvit.errors import ConfigError
from longvit.parallel import (closed_form_volume, comm_report, distributed_forward, gather_plan, partition,
                              plan_log)
from longvit.tensor import Tensor
from longvit.verify import paper_schedule_for, random_schedule, random_weights


def test_partition_examples():
    assert partition(8, 1).ranges == ((0, 8),)
    assert partition(8, 4).ranges == ((0, 2), (2, 4), (4, 6), (6, 8))
    assert partition(10, 4).sizes() == [3, 3, 2, 2]


def test_partition_rejects_more_workers_than_tokens():
    with pytest.raises(ConfigError):
        partition(3, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(1, 16))
def test_partition_covers_contiguously(n, w):
    if w > n:
        return
    part = partition(n, w)
    assert part.ranges[0][0] == 0 and part.ranges[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(part.ranges, part.ranges[1:]))
    assert max(part.sizes()) - min(part.sizes()) <= 1


def test_local_segments_need_no_fetch():
    plan = gather_plan(partition(16, 4), DilationSchedule(((2, 1), (4, 2))), heads=2)
    assert all(not fetches for fetches in plan.values())


def test_full_span_fetches_other_half():
    plan = gather_plan(partition(8, 2), DilationSchedule(((8, 1),)), heads=1)
    assert [f.rows.tolist() for f in plan[(0, 0)]] == [[4, 5, 6, 7]]
    assert [f.rows.tolist() for f in plan[(1, 0)]] == [[0, 1, 2, 3]]


def test_dilated_span_ships_offset_subset():
    plan = gather_plan(partition(8, 2), DilationSchedule(((1, 1), (8, 2))), heads=2)
    for dst in (0, 1):
        per_head = {}
        for f in plan[(dst, 1)]:
            for h in f.heads:
                per_head[h] = per_head.get(h, 0) + f.rows.size
        assert per_head == {0: 2, 1: 2}
    head0 = next(f for f in plan[(0, 1)] if 0 in f.heads)
    assert head0.rows.tolist() == [4, 6]


def test_single_worker_is_local():
    rng = np.random.default_rng(0)
    w = random_weights(16, 4, rng)
    x = rng.normal(size=(64, 16))
    sched = paper_schedule_for(64)
    out, log = distributed_forward(x, w, sched, 1)
    assert len(log) == 0
    assert np.array_equal(out, multihead_dilated_attention(Tensor(x), w, sched).data)


@pytest.mark.parametrize("workers", [2, 4, 8])
def test_matches_single_node_at_1024(workers):
    rng = np.random.default_rng(workers)
    w = random_weights(32, 16, rng)
    x = rng.normal(size=(1024, 32))
    sched = DilationSchedule(PRETRAIN_PAIRS)
    out, _ = distributed_forward(x, w, sched, workers)
    ref = multihead_dilated_attention(Tensor(x), w, sched).data
    assert np.max(np.abs(out - ref)) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 150), st.integers(1, 6), st.integers(0, 10**6))
def test_matches_single_node_random(n, workers, seed):
    workers = min(workers, n)
    rng = np.random.default_rng(seed)
    w = random_weights(8, 4, rng)
    x = rng.normal(size=(n, 8))
    sched = random_schedule(n, rng)
    out, log = distributed_forward(x, w, sched, workers)
    assert np.max(np.abs(out - multihead_dilated_attention(Tensor(x), w, sched).data)) <= 1e-12
    assert log == plan_log(n, workers, sched, 4, 2)


def test_log_is_deterministic():
    rng = np.random.default_rng(1)
    w = random_weights(16, 4, rng)
    x = rng.normal(size=(256, 16))
    sched = paper_schedule_for(256)
    assert distributed_forward(x, w, sched, 4)[1] == distributed_forward(x, w, sched, 4)[1]


@pytest.mark.parametrize("n,workers", [(1024, 4), (1024, 8), (256, 2), (4096, 4)])
def test_volume_matches_closed_form_when_aligned(n, workers):
    sched = paper_schedule_for(n)
    assert plan_log(n, workers, sched, 16, 24).total() == closed_form_volume(n, workers, sched, 16, 24)


def test_traffic_per_pair_scales_with_one_over_ratio():
    # one segment spanning all workers: shipped rows are the (w / r) selected ones
    n, heads, dh = 1024, 16, 24
    for r in (1, 2, 4, 8, 16):
        sched = DilationSchedule(((1, 1), (n, r))) if r > 1 else DilationSchedule(((n, 1),))
        report = comm_report(plan_log(n, 4, sched, heads, dh), 4, n, sched, heads * dh)
        expected = (n // r) * dh * 2 * 3 * heads
        assert report.per_pair[(n, r)] == expected


def test_comm_report_single_worker_is_zero():
    sched = DilationSchedule(PRETRAIN_PAIRS)
    report = comm_report(plan_log(1024, 1, sched, 16, 24), 1, 1024, sched, 384)
    assert report.total_elements == 0 and report.dense_baseline == 0


def test_all_local_schedule_has_zero_traffic():
    sched = DilationSchedule(((64, 1), (128, 2), (256, 4)))
    assert comm_report(plan_log(1024, 4, sched, 16, 24), 4, 1024, sched, 384).total_elements == 0


def test_dilated_traffic_below_dense_baseline():
    sched = DilationSchedule(PRETRAIN_PAIRS)
    report = comm_report(plan_log(1024, 4, sched, 16, 24), 4, 1024, sched, 384)
    assert 0 < report.total_elements < report.dense_baseline
    assert "total" in report.to_table()
    assert "dense_baseline=" in report.to_kv()
