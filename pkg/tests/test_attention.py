"""Summary algebra: summarize/merge/remove/finalize plus the rotary helpers."""

import math

import numpy as np
import pytest

from attnreuse.attention import (
    AttentionSummary,
    CancellationError,
    EmptySummaryError,
    MassExceededError,
    RopeTable,
    attend_full,
    avg_cos,
    empty_summary,
    finalize,
    merge,
    remove,
    rope_rotate,
    summarize,
)


def naive_summary(q, keys, values):
    # independent reference: plain softmax in one shot
    logits = keys @ q / math.sqrt(keys.shape[1])
    m = logits.max()
    w = np.exp(logits - m)
    z = w.sum()
    return w @ values / z, m + math.log(z)


def test_empty_summary_shape_and_invariants():
    s = empty_summary(5)
    assert s.count == 0
    assert s.lse == -math.inf
    assert s.acc.shape == (5,)
    assert not s.acc.any()
    with pytest.raises(EmptySummaryError):
        finalize(s)


def test_summarize_matches_naive_reference():
    rng = np.random.default_rng(11)
    for _ in range(50):
        d = int(rng.choice([2, 8, 64]))
        n = int(rng.integers(1, 300))
        keys = rng.standard_normal((n, d))
        vals = rng.standard_normal((n, d + 1))
        q = rng.standard_normal(d)
        s = summarize(q, keys, vals)
        acc, lse = naive_summary(q, keys, vals)
        assert s.count == n
        np.testing.assert_allclose(s.acc, acc, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(s.lse, lse, rtol=1e-12)


def test_summarize_empty_range():
    s = summarize(np.ones(4), np.zeros((0, 4)), np.zeros((0, 3)))
    assert s.count == 0
    assert s.lse == -math.inf


def test_summarize_input_validation():
    q = np.ones(4)
    with pytest.raises(ValueError):
        summarize(q, np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        summarize(q, np.zeros(4), np.zeros(4))


def test_summarize_streaming_blocks_match_single_pass():
    # the block size must not change the result beyond roundoff
    rng = np.random.default_rng(3)
    n, d = 10000, 16
    keys = rng.standard_normal((n, d))
    vals = rng.standard_normal((n, d))
    q = rng.standard_normal(d)
    whole = summarize(q, keys, vals, block=n)
    for block in (7, 1000, 4096):
        s = summarize(q, keys, vals, block=block)
        assert s.count == whole.count
        np.testing.assert_allclose(s.acc, whole.acc, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(s.lse, whole.lse, rtol=1e-12)


def test_merge_reproduces_monolith_at_every_cut():
    rng = np.random.default_rng(21)
    d, n = 8, 33
    keys = rng.standard_normal((n, d))
    vals = rng.standard_normal((n, d))
    q = rng.standard_normal(d)
    whole = summarize(q, keys, vals)
    for cut in range(n + 1):
        got = merge(summarize(q, keys[:cut], vals[:cut]), summarize(q, keys[cut:], vals[cut:]))
        assert got.count == n
        np.testing.assert_allclose(got.acc, whole.acc, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(got.lse, whole.lse, rtol=1e-12)


def test_merge_empty_identity_and_commutativity():
    rng = np.random.default_rng(5)
    keys = rng.standard_normal((12, 4))
    vals = rng.standard_normal((12, 4))
    s = summarize(rng.standard_normal(4), keys, vals)
    e = empty_summary(4)
    for got in (merge(s, e), merge(e, s)):
        assert got.count == s.count
        np.testing.assert_allclose(got.acc, s.acc, rtol=0, atol=0)
        assert got.lse == s.lse
    a = summarize(np.ones(4), keys[:5], vals[:5])
    b = summarize(np.ones(4), keys[5:], vals[5:])
    ab, ba = merge(a, b), merge(b, a)
    np.testing.assert_allclose(ab.acc, ba.acc, rtol=1e-14)
    np.testing.assert_allclose(ab.lse, ba.lse, rtol=1e-14)


def test_merge_three_way_association():
    rng = np.random.default_rng(6)
    keys = rng.standard_normal((30, 6))
    vals = rng.standard_normal((30, 6))
    q = rng.standard_normal(6)
    parts = [summarize(q, keys[i : i + 10], vals[i : i + 10]) for i in (0, 10, 20)]
    left = merge(merge(parts[0], parts[1]), parts[2])
    right = merge(parts[0], merge(parts[1], parts[2]))
    np.testing.assert_allclose(left.acc, right.acc, rtol=1e-13)
    np.testing.assert_allclose(left.lse, right.lse, rtol=1e-13)


def test_remove_inverts_merge():
    rng = np.random.default_rng(7)
    for _ in range(200):
        d = int(rng.choice([2, 8, 64]))
        n = int(rng.integers(2, 128))
        cut = int(rng.integers(1, n))
        keys = rng.standard_normal((n, d))
        vals = rng.standard_normal((n, d))
        q = rng.standard_normal(d)
        prefix = summarize(q, keys[:cut], vals[:cut])
        band = summarize(q, keys[cut:], vals[cut:])
        got = remove(merge(prefix, band), band)
        assert got.count == prefix.count
        np.testing.assert_allclose(got.acc, prefix.acc, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got.lse, prefix.lse, rtol=1e-9)


def test_remove_edge_cases():
    rng = np.random.default_rng(8)
    keys = rng.standard_normal((10, 4))
    vals = rng.standard_normal((10, 4))
    q = rng.standard_normal(4)
    s = summarize(q, keys, vals)
    # empty band is a no-op
    got = remove(s, empty_summary(4))
    assert got.count == s.count and got.lse == s.lse
    # removing the whole thing yields the empty summary
    got = remove(s, s)
    assert got.count == 0 and got.lse == -math.inf
    # band cannot cover more tokens than the whole
    big = AttentionSummary(acc=s.acc, lse=s.lse, count=s.count + 1)
    with pytest.raises(ValueError):
        remove(s, big)


def test_remove_guards():
    # equal counts but different mass: cancellation, not silent zero
    a = AttentionSummary(acc=np.ones(3), lse=1.0, count=4)
    b = AttentionSummary(acc=np.ones(3), lse=2.0, count=4)
    with pytest.raises(CancellationError):
        remove(a, b)
    # band mass above the whole is impossible
    c = AttentionSummary(acc=np.ones(3), lse=5.0, count=1)
    with pytest.raises(MassExceededError):
        remove(a, c)
    # dominating band: residual mass below the guard
    prefix = AttentionSummary(acc=np.ones(3), lse=-30.0, count=8)
    band = AttentionSummary(acc=2 * np.ones(3), lse=10.0, count=8)
    whole = merge(prefix, band)
    with pytest.raises(CancellationError):
        remove(whole, band)


def test_summary_astype_storage_roundtrip():
    rng = np.random.default_rng(9)
    s = summarize(rng.standard_normal(6), rng.standard_normal((20, 6)), rng.standard_normal((20, 6)))
    s32 = s.astype(np.float32)
    assert s32.acc.dtype == np.float32
    assert s32.count == s.count
    np.testing.assert_allclose(s32.acc, s.acc, rtol=1e-6)
    assert s32.lse == float(np.float32(s.lse))
    e32 = empty_summary(6).astype(np.float32)
    assert e32.lse == -math.inf and e32.count == 0


def test_f32_storage_split_merge_stays_accurate():
    rng = np.random.default_rng(10)
    for _ in range(30):
        d = int(rng.choice([2, 8, 64]))
        n = int(rng.integers(2, 500))
        cut = int(rng.integers(0, n + 1))
        keys = rng.standard_normal((n, d))
        vals = rng.standard_normal((n, d))
        q = rng.standard_normal(d)
        whole = summarize(q, keys, vals, dtype=np.float32)
        got = merge(
            summarize(q, keys[:cut], vals[:cut], dtype=np.float32),
            summarize(q, keys[cut:], vals[cut:], dtype=np.float32),
        )
        np.testing.assert_allclose(got.acc, whole.acc, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(got.lse, whole.lse, rtol=1e-5, atol=1e-5)


def test_attend_full_is_finalized_summary():
    rng = np.random.default_rng(12)
    keys = rng.standard_normal((40, 8))
    vals = rng.standard_normal((40, 8))
    q = rng.standard_normal(8)
    out, s = attend_full(q, keys, vals)
    assert s.count == 40
    np.testing.assert_array_equal(out, finalize(s))
    ref, _ = naive_summary(q, keys, vals)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_rope_table_validation():
    with pytest.raises(ValueError):
        RopeTable(3)
    with pytest.raises(ValueError):
        RopeTable(0)
    with pytest.raises(ValueError):
        RopeTable(4, base=1.0)
    t = RopeTable(8, base=100.0)
    j = np.arange(4, dtype=np.float64)
    np.testing.assert_allclose(t.freqs, 100.0 ** (-2.0 * j / 8.0), rtol=1e-15)


def test_rope_rotate_properties():
    rng = np.random.default_rng(13)
    table = RopeTable(16)
    x = rng.standard_normal(16)
    # identity at t=0, norm preservation, additivity of angles
    np.testing.assert_allclose(rope_rotate(x, 0.0, table), x, rtol=0, atol=0)
    y = rope_rotate(x, 1234.5, table)
    np.testing.assert_allclose(np.linalg.norm(y), np.linalg.norm(x), rtol=1e-12)
    ab = rope_rotate(rope_rotate(x, 100.0, table), 23.0, table)
    np.testing.assert_allclose(ab, rope_rotate(x, 123.0, table), rtol=1e-12, atol=1e-12)
    # batch form agrees with row-at-a-time
    xs = rng.standard_normal((5, 16))
    got = rope_rotate(xs, 77.0, table)
    for i in range(5):
        np.testing.assert_allclose(got[i], rope_rotate(xs[i], 77.0, table), rtol=1e-14)
    with pytest.raises(ValueError):
        rope_rotate(np.ones(15), 1.0, table)


def test_avg_cos_identity_and_validation():
    rng = np.random.default_rng(14)
    for _ in range(100):
        d = int(rng.choice([2, 8, 64]))
        table = RopeTable(d)
        x = rng.standard_normal(d)
        delta = float(rng.uniform(0.0, 1e5))
        lhs = np.linalg.norm(x - rope_rotate(x, delta, table)) ** 2
        rhs = 2.0 * np.dot(x, x) * (1.0 - avg_cos(x, delta, table))
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10 * max(1.0, lhs))
    table = RopeTable(4)
    assert avg_cos(np.ones(4), 0.0, table) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        avg_cos(np.zeros(4), 1.0, table)
    with pytest.raises(ValueError):
        avg_cos(np.ones((2, 4)), 1.0, table)
