import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longvit.attention import (PRETRAIN_PAIRS, AttentionWeights, DilationSchedule, attention_score_flops,
                               dense_flops, dilated_attention, dilated_head, flops_estimate, mixing_weights,
                               multihead_dilated_attention, oracle_masked_dense, plain_mha,
                               schedule_for_tokens, segment_attention, select_indices)
from longvit.errors import ConfigError, ContractError, DimensionError
from longvit.tensor import Tensor
from longvit.verify import ORACLE_TOL, random_schedule, random_weights


def softmax_attend(q, k, v):
    s = q @ k.T / math.sqrt(q.shape[1])
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return p @ v / p.sum(axis=1, keepdims=True)


def test_select_indices_ratio_one_is_dense():
    assert select_indices(0, 4, 1, 0, 100).tolist() == [0, 1, 2, 3]


def test_select_indices_definition():
    assert select_indices(0, 8, 4, 1, 100).tolist() == [1, 5]
    assert select_indices(8, 8, 4, 3, 100).tolist() == [11, 15]


def test_select_indices_clipped_tail():
    assert select_indices(8, 8, 2, 1, 12).tolist() == [9, 11]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 4), st.integers(0, 3))
def test_offsets_partition_each_segment(n, log_r, extra):
    r = 2**log_r
    w = r * 2**extra
    for start in range(0, n, w):
        picked = np.concatenate([select_indices(start, w, r, s, n) for s in range(r)])
        assert sorted(picked.tolist()) == list(range(start, min(start + w, n)))


def test_segment_attention_single_row():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 3))
    out, den = segment_attention(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3))), Tensor(v))
    assert np.allclose(out.data, v, atol=1e-15)
    assert den.data[0] == 1.0


def test_segment_attention_identical_values():
    rng = np.random.default_rng(1)
    v = np.tile(rng.normal(size=(1, 4)), (6, 1))
    out, _ = segment_attention(Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(6, 4))), Tensor(v))
    assert np.allclose(out.data, v, atol=1e-14)


def test_segment_attention_matches_naive():
    rng = np.random.default_rng(2)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    out, _ = segment_attention(Tensor(q), Tensor(k), Tensor(v))
    assert np.max(np.abs(out.data - softmax_attend(q, k, v))) <= 1e-10


def test_dilated_head_full_span_is_dense():
    rng = np.random.default_rng(3)
    q, k, v = (rng.normal(size=(12, 4)) for _ in range(3))
    out = dilated_head(Tensor(q), Tensor(k), Tensor(v), DilationSchedule(((12, 1),)), 0)
    assert np.max(np.abs(out.data - softmax_attend(q, k, v))) <= 1e-12


def test_dilated_head_hand_sized_two_pairs():
    q = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, -0.5], [-1.0, 2.0]])
    k = np.array([[0.2, 0.1], [-0.3, 0.4], [1.0, 1.0], [0.0, -1.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]])
    sched = DilationSchedule(((2, 1), (4, 2)))
    out = dilated_head(Tensor(q), Tensor(k), Tensor(v), sched, 0).data

    def part(rows, keys):
        s = q[rows] @ k[keys].T / math.sqrt(2)
        den = np.exp(s).sum(axis=1)
        return np.exp(s) @ v[keys] / den[:, None], den

    expected = np.empty((4, 2))
    for seg in ([0, 1], [2, 3]):
        expected[seg] = part(seg, seg)[0]
    # head 0 uses offset 0, so the ratio-2 pair covers positions {0, 2} only
    o_wide, den_wide = part([0, 2], [0, 2])
    for j, pos in enumerate([0, 2]):
        local = [0, 1] if pos < 2 else [2, 3]
        o_local, den_local = part([pos], local)
        a, b = den_local[0], den_wide[j]
        expected[pos] = (a * o_local[0] + b * o_wide[j]) / (a + b)
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_two_heads_use_different_offsets():
    # N=2, one pair (2, 2): head 0 sees only position 0, head 1 only position 1
    x = np.eye(2)
    eye = Tensor(np.eye(2))
    zero = Tensor(np.zeros(2))
    w = AttentionWeights(eye, zero, eye, zero, eye, zero, eye, zero, heads=2)
    sched = DilationSchedule(((1, 1), (2, 2)))
    alpha = mixing_weights(*(np.stack([x[:, :1].copy(), x[:, 1:].copy()]),) * 3, sched)
    assert alpha.shape == (2, 2, 2)
    # the ratio-2 pair reaches position 0 for head 0 and position 1 for head 1
    assert alpha[1, 0, 0] > 0 and alpha[1, 0, 1] == 0
    assert alpha[1, 1, 1] > 0 and alpha[1, 1, 0] == 0
    out = multihead_dilated_attention(Tensor(x), w, sched).data
    ref = oracle_masked_dense(x, w, sched)
    assert np.max(np.abs(out - ref)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 200), st.integers(0, 10**6))
def test_mixing_weights_sum_to_one(n, seed):
    rng = np.random.default_rng(seed)
    sched = random_schedule(n, rng)
    q, k, v = (rng.normal(size=(3, n, 4)) for _ in range(3))
    alpha = mixing_weights(q, k, v, sched)
    assert np.all(alpha >= 0)
    assert np.max(np.abs(alpha.sum(axis=0) - 1)) <= 1e-12


def test_single_full_pair_has_unit_weight():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(2, 16, 4)) for _ in range(3))
    assert np.all(mixing_weights(q, k, v, DilationSchedule(((16, 1),))) == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 3), st.integers(0, 10**6))
def test_matches_masked_dense_oracle(n, heads, seed):
    rng = np.random.default_rng(seed)
    sched = random_schedule(n, rng)
    w = random_weights(4 * heads, heads, rng)
    x = rng.normal(size=(n, 4 * heads))
    out = multihead_dilated_attention(Tensor(x), w, sched).data
    assert np.max(np.abs(out - oracle_masked_dense(x, w, sched))) <= ORACLE_TOL


def test_paper_schedule_at_1024_matches_oracle():
    rng = np.random.default_rng(5)
    w = random_weights(32, 4, rng)
    x = rng.normal(size=(1024, 32))
    sched = DilationSchedule(PRETRAIN_PAIRS)
    out = multihead_dilated_attention(Tensor(x), w, sched).data
    assert np.max(np.abs(out - oracle_masked_dense(x, w, sched))) <= ORACLE_TOL


@pytest.mark.parametrize("n", [1, 7, 64, 256])
def test_full_span_equals_plain_mha(n):
    rng = np.random.default_rng(n)
    w = random_weights(32, 4, rng)
    x = rng.normal(size=(n, 32))
    out = multihead_dilated_attention(Tensor(x), w, DilationSchedule(((n, 1),))).data
    assert np.max(np.abs(out - plain_mha(x, w))) <= 1e-10


def test_single_token_is_value_path():
    rng = np.random.default_rng(6)
    w = random_weights(8, 2, rng)
    x = rng.normal(size=(1, 8))
    out = multihead_dilated_attention(Tensor(x), w, DilationSchedule(PRETRAIN_PAIRS)).data
    expected = (x @ w.wv.data + w.bv.data) @ w.wo.data + w.bo.data
    assert np.allclose(out, expected, atol=1e-14)


def test_ratio_one_pair_is_block_diagonal():
    rng = np.random.default_rng(7)
    q, k, v = (rng.normal(size=(1, 12, 3)) for _ in range(3))
    out = dilated_attention(Tensor(q), Tensor(k), Tensor(v), DilationSchedule(((4, 1),))).data[0]
    for a in range(0, 12, 4):
        blk = slice(a, a + 4)
        assert np.allclose(out[blk], softmax_attend(q[0, blk], k[0, blk], v[0, blk]), atol=1e-14)


def test_equivariant_to_whole_segment_permutation():
    # swapping two complete top-level segments permutes the output the same way
    rng = np.random.default_rng(8)
    w = random_weights(16, 2, rng)
    sched = DilationSchedule(((4, 1), (8, 2)))
    x = rng.normal(size=(16, 16))
    perm = np.r_[8:16, 0:8]
    a = multihead_dilated_attention(Tensor(x), w, sched).data
    b = multihead_dilated_attention(Tensor(x[perm]), w, sched).data
    assert np.max(np.abs(a[perm] - b)) <= 1e-13


@pytest.mark.parametrize("threads", [2, 3])
def test_thread_count_does_not_change_result(threads):
    rng = np.random.default_rng(9)
    w = random_weights(32, 4, rng)
    x = Tensor(rng.normal(size=(300, 32)))
    sched = schedule_for_tokens(300)
    one = multihead_dilated_attention(x, w, sched, threads=1).data
    many = multihead_dilated_attention(x, w, sched, threads=threads).data
    assert np.array_equal(one, many)


def test_hidden_not_divisible_by_heads():
    rng = np.random.default_rng(10)
    with pytest.raises(ConfigError):
        AttentionWeights.init(10, 4, rng)


def test_wrong_input_width():
    w = AttentionWeights.init(8, 2, np.random.default_rng(11))
    with pytest.raises(DimensionError):
        multihead_dilated_attention(Tensor(np.zeros((4, 6))), w, DilationSchedule(((4, 1),)))


def test_schedule_validation():
    with pytest.raises(ContractError):
        DilationSchedule(((4, 2), (8, 4)))
    with pytest.raises(ConfigError):
        DilationSchedule(((4, 1), (8, 16)))
    with pytest.raises(ConfigError):
        DilationSchedule(((8, 1), (4, 2)))
    with pytest.raises(ConfigError):
        DilationSchedule.parse("64-1")


def test_schedule_parse_and_str():
    s = DilationSchedule.parse("64:1,128:2")
    assert s.pairs == ((64, 1), (128, 2))
    assert str(s) == "{64, 128}/{1, 2}"


def test_schedule_table_lookup():
    assert schedule_for_tokens(1024).pairs == PRETRAIN_PAIRS
    assert schedule_for_tokens(256).segments[-1] == 256
    big = schedule_for_tokens(1 << 20, "extend")
    assert big.segments[-1] >= 1 << 20
    assert all(w // r == 64 for w, r in big.pairs[1:])


def test_schedule_truncation_keeps_a_spanning_pair():
    s = DilationSchedule(PRETRAIN_PAIRS).truncate(100)
    assert s.pairs == ((64, 1), (128, 2))


def test_dense_flops_dominate():
    for n in (64, 256, 1024, 4096):
        sched = schedule_for_tokens(n)
        assert dense_flops(n, 384) >= flops_estimate(n, sched, 384)


def test_score_flops_ratio_at_1024():
    d = 384
    ratio = attention_score_flops(1024, DilationSchedule(PRETRAIN_PAIRS), d) / (4 * 1024 * 1024 * d)
    assert ratio < 0.25


def test_flops_grow_linearly_under_extension():
    ns = [1024 * 2**i for i in range(7)]
    f = [flops_estimate(n, schedule_for_tokens(n, "extend"), 384, 16) for n in ns]
    assert max(b / a for a, b in zip(f, f[1:])) <= 2.2


def test_fixed_ratio_extension_is_superlinear():
    a = flops_estimate(32768, schedule_for_tokens(32768, "extend-fixed-ratio"), 384)
    b = flops_estimate(65536, schedule_for_tokens(65536, "extend-fixed-ratio"), 384)
    assert b / a > 2.2
