"""Append-only paged key/value store with logical traffic accounting.

One store holds the rotated keys and raw values for every (layer, kv head)
of a single request.  Tokens are 1-based; token t lives in page
(t-1) // page_size at slot (t-1) % page_size.  Values are rounded through
the storage dtype at append time but kept in a contiguous float64 buffer
(the upcast is exact), so reads are zero-copy views and downstream math can
accumulate in float64 without per-read conversions.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrafficCounter:
    """Logical read traffic: token count, derived bytes, and a log2 size histogram."""

    tokens_read: int = 0
    bytes_read: int = 0
    read_histogram: Counter = field(default_factory=Counter)

    def record(self, tokens: int, nbytes: int):
        self.tokens_read += tokens
        self.bytes_read += nbytes
        self.read_histogram[tokens.bit_length()] += 1


@dataclass(frozen=True)
class KvPage:
    """One fixed-size page; rows beyond `fill` are zero padding."""

    keys: np.ndarray
    values: np.ndarray
    fill: int


class _HeadBuffer:
    __slots__ = ("keys", "values", "n")

    def __init__(self, d: int, d_v: int):
        self.keys = np.zeros((128, d), dtype=np.float64)
        self.values = np.zeros((128, d_v), dtype=np.float64)
        self.n = 0

    def grow_to(self, need: int):
        cap = self.keys.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("keys", "values"):
            old = getattr(self, name)
            buf = np.zeros((new_cap, old.shape[1]), dtype=np.float64)
            buf[: self.n] = old[: self.n]
            setattr(self, name, buf)


class KvStore:
    """Per-(layer, kv head) append-only token store.

    Writers append exactly once per decode step; readers take contiguous
    [lo, hi] views (inclusive, 1-based).  Single-writer by contract, no
    locking.  `page_rounded_bytes` switches byte accounting from logical
    tokens to whole pages touched.
    """

    def __init__(
        self,
        d: int,
        d_v: int,
        *,
        page_size: int = 16,
        storage_dtype=np.float32,
        page_rounded_bytes: bool = False,
    ):
        if page_size < 1:
            raise ValueError("page_size must be >= 1")
        self.d = d
        self.d_v = d_v
        self.page_size = page_size
        self.storage_dtype = np.dtype(storage_dtype)
        if self.storage_dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError("storage dtype must be float32 or float64")
        self.page_rounded_bytes = page_rounded_bytes
        self._heads: dict[tuple[int, int], _HeadBuffer] = {}

    @property
    def token_bytes(self) -> int:
        return (self.d + self.d_v) * self.storage_dtype.itemsize

    def _buf(self, layer: int, kv_head: int) -> _HeadBuffer:
        try:
            return self._heads[(layer, kv_head)]
        except KeyError:
            raise ValueError(f"no tokens stored for layer={layer} kv_head={kv_head}") from None

    def length(self, layer: int, kv_head: int) -> int:
        buf = self._heads.get((layer, kv_head))
        return 0 if buf is None else buf.n

    def append(self, layer: int, kv_head: int, k: np.ndarray, v: np.ndarray) -> int:
        """Append one token; returns its 1-based position."""
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if k.shape != (self.d,) or v.shape != (self.d_v,):
            raise ValueError(f"expected key ({self.d},) and value ({self.d_v},), got {k.shape} and {v.shape}")
        buf = self._heads.setdefault((layer, kv_head), _HeadBuffer(self.d, self.d_v))
        buf.grow_to(buf.n + 1)
        if self.storage_dtype == np.float32:
            k = k.astype(np.float32).astype(np.float64)
            v = v.astype(np.float32).astype(np.float64)
        buf.keys[buf.n] = k
        buf.values[buf.n] = v
        buf.n += 1
        return buf.n

    def read_range(
        self,
        layer: int,
        kv_head: int,
        span: tuple[int, int],
        counter: TrafficCounter | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous (keys, values) views over tokens [lo, hi], recording traffic."""
        lo, hi = span
        buf = self._buf(layer, kv_head)
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid token range [{lo}, {hi}]")
        if hi > buf.n:
            raise ValueError(f"token range [{lo}, {hi}] exceeds stored length {buf.n}")
        if counter is not None:
            tokens = hi - lo + 1
            if self.page_rounded_bytes:
                first_page = (lo - 1) // self.page_size
                last_page = (hi - 1) // self.page_size
                nbytes = (last_page - first_page + 1) * self.page_size * self.token_bytes
            else:
                nbytes = tokens * self.token_bytes
            counter.record(tokens, nbytes)
        return buf.keys[lo - 1 : hi], buf.values[lo - 1 : hi]

    def n_pages(self, layer: int, kv_head: int) -> int:
        n = self._buf(layer, kv_head).n
        return -(-n // self.page_size)

    def page(self, layer: int, kv_head: int, index: int) -> KvPage:
        buf = self._buf(layer, kv_head)
        n_pages = self.n_pages(layer, kv_head)
        if not 0 <= index < n_pages:
            raise IndexError(f"page {index} out of range ({n_pages} pages)")
        lo = index * self.page_size
        hi = min(lo + self.page_size, buf.keys.shape[0])
        fill = min(buf.n - lo, self.page_size)
        keys = buf.keys[lo:hi]
        values = buf.values[lo:hi]
        if keys.shape[0] < self.page_size:
            # final page of a buffer whose capacity is not page-aligned
            pad = self.page_size - keys.shape[0]
            keys = np.vstack([keys, np.zeros((pad, self.d))])
            values = np.vstack([values, np.zeros((pad, self.d_v))])
        return KvPage(keys=keys, values=values, fill=fill)
