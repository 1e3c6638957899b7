"""Paged KV store: append/read semantics, storage rounding, traffic accounting."""

import numpy as np
import pytest

from attnreuse.kvstore import KvStore, TrafficCounter


def test_append_returns_one_based_positions():
    store = KvStore(4, 2)
    assert store.append(0, 0, np.ones(4), np.ones(2)) == 1
    assert store.append(0, 0, np.ones(4), np.ones(2)) == 2
    assert store.length(0, 0) == 2
    assert store.length(0, 1) == 0  # untouched head


def test_f32_storage_rounds_exactly_once():
    rng = np.random.default_rng(1)
    store = KvStore(8, 8, storage_dtype=np.float32)
    k = rng.standard_normal(8)
    v = rng.standard_normal(8)
    store.append(0, 0, k, v)
    keys, vals = store.read_range(0, 0, (1, 1))
    assert keys.dtype == np.float64  # buffers stay f64; the rounding is in the values
    np.testing.assert_array_equal(keys[0], k.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(vals[0], v.astype(np.float32).astype(np.float64))


def test_f64_storage_is_exact():
    rng = np.random.default_rng(2)
    store = KvStore(4, 4, storage_dtype=np.float64)
    k = rng.standard_normal(4)
    v = rng.standard_normal(4)
    store.append(0, 0, k, v)
    keys, vals = store.read_range(0, 0, (1, 1))
    np.testing.assert_array_equal(keys[0], k)
    np.testing.assert_array_equal(vals[0], v)


def test_storage_dtype_validation():
    with pytest.raises(ValueError):
        KvStore(4, 4, storage_dtype=np.float16)
    with pytest.raises(ValueError):
        KvStore(4, 4, page_size=0)


def test_append_shape_validation():
    store = KvStore(4, 2)
    with pytest.raises(ValueError):
        store.append(0, 0, np.ones(3), np.ones(2))
    with pytest.raises(ValueError):
        store.append(0, 0, np.ones(4), np.ones(3))


def test_read_range_views_and_bounds():
    rng = np.random.default_rng(3)
    store = KvStore(2, 2)
    rows = rng.standard_normal((10, 2)).astype(np.float32).astype(np.float64)
    for i in range(10):
        store.append(0, 0, rows[i], rows[i])
    keys, _ = store.read_range(0, 0, (3, 7))
    assert keys.shape == (5, 2)
    np.testing.assert_array_equal(keys, rows[2:7])
    assert keys.base is not None  # zero-copy view
    for bad in ((0, 5), (5, 11), (6, 5), (1, 0)):
        with pytest.raises(ValueError):
            store.read_range(0, 0, bad)
    with pytest.raises(ValueError):
        store.read_range(1, 0, (1, 1))  # never-written head


def test_traffic_accounting():
    store = KvStore(4, 4, storage_dtype=np.float32)
    for _ in range(20):
        store.append(0, 0, np.ones(4), np.ones(4))
    t = TrafficCounter()
    store.read_range(0, 0, (1, 20), t)
    store.read_range(0, 0, (5, 8), t)
    assert t.tokens_read == 24
    assert store.token_bytes == (4 + 4) * 4
    assert t.bytes_read == 24 * store.token_bytes
    # histogram buckets by bit length of the read size
    assert t.read_histogram[(20).bit_length()] == 1
    assert t.read_histogram[(4).bit_length()] == 1


def test_page_rounded_byte_accounting():
    store = KvStore(4, 4, page_size=16, page_rounded_bytes=True)
    for _ in range(20):
        store.append(0, 0, np.ones(4), np.ones(4))
    t = TrafficCounter()
    store.read_range(0, 0, (1, 1), t)  # touches one page
    assert t.tokens_read == 1
    assert t.bytes_read == 16 * store.token_bytes
    t2 = TrafficCounter()
    store.read_range(0, 0, (16, 17), t2)  # straddles a page boundary
    assert t2.bytes_read == 32 * store.token_bytes


def test_page_arithmetic_and_padding():
    store = KvStore(2, 2, page_size=4)
    for i in range(1, 7):
        store.append(0, 0, np.full(2, float(i)), np.full(2, float(i)))
    assert store.n_pages(0, 0) == 2
    full = store.page(0, 0, 0)
    assert full.fill == 4
    np.testing.assert_array_equal(full.keys[:, 0], [1.0, 2.0, 3.0, 4.0])
    part = store.page(0, 0, 1)
    assert part.fill == 2
    np.testing.assert_array_equal(part.keys[:, 0], [5.0, 6.0, 0.0, 0.0])
    np.testing.assert_array_equal(part.values[2:], np.zeros((2, 2)))
    with pytest.raises(IndexError):
        store.page(0, 0, 2)


def test_buffer_growth_preserves_rows():
    rng = np.random.default_rng(4)
    store = KvStore(2, 2)
    rows = rng.standard_normal((300, 2)).astype(np.float32).astype(np.float64)
    for i in range(300):
        store.append(0, 0, rows[i], rows[i])
    keys, vals = store.read_range(0, 0, (1, 300))
    np.testing.assert_array_equal(keys, rows)
    np.testing.assert_array_equal(vals, rows)


def test_heads_are_independent():
    store = KvStore(2, 2)
    store.append(0, 0, np.ones(2), np.ones(2))
    store.append(1, 0, 2 * np.ones(2), 2 * np.ones(2))
    store.append(0, 1, 3 * np.ones(2), 3 * np.ones(2))
    assert store.length(0, 0) == 1
    assert store.length(1, 0) == 1
    assert store.length(0, 1) == 1
    keys, _ = store.read_range(0, 1, (1, 1))
    np.testing.assert_array_equal(keys[0], [3.0, 3.0])
