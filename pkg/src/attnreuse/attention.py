"""Log-domain attention summaries and rotary position embedding.

The decode path in this package never materializes full softmax weight
vectors.  Every partial attention result is carried as a compact summary
(normalized accumulator, log-sum-exp, token count).  Summaries over disjoint
token ranges can be merged in any order, a trailing band can be removed
again, and a summary is turned into an attention output by `finalize`.  All
of this happens without revisiting the tokens that produced the summary.

Numerically everything accumulates in float64; summaries may be *stored* at
float32, which is modeled by rounding the accumulator and the log-sum-exp
through the storage dtype.  The softmax scale is fixed to 1/sqrt(d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CancellationError(ArithmeticError):
    """Removing the band would cancel catastrophically; recompute instead."""


class MassExceededError(ValueError):
    """The band carries more softmax mass than the summary it is removed from."""


class EmptySummaryError(ValueError):
    """finalize() was called on a summary covering zero tokens."""


@dataclass(frozen=True)
class AttentionSummary:
    """Normalized attention state over some set of tokens.

    acc is S/Z (the softmax-weighted value average), lse is ln(Z) with the
    1/sqrt(d) scale already applied to the logits, and count is the number
    of tokens summarized.  The empty summary has lse == -inf and count == 0.
    Instances are treated as immutable.
    """

    acc: np.ndarray
    lse: float
    count: int

    def astype(self, dtype) -> "AttentionSummary":
        """Round the stored representation through `dtype` (storage model)."""
        dt = np.dtype(dtype)
        acc = self.acc.astype(dt)
        lse = self.lse if math.isinf(self.lse) else float(dt.type(self.lse))
        return AttentionSummary(acc=acc, lse=lse, count=self.count)


def empty_summary(d_v: int, dtype=np.float64) -> AttentionSummary:
    return AttentionSummary(acc=np.zeros(d_v, dtype=dtype), lse=-math.inf, count=0)


def _scale(d: int) -> float:
    return 1.0 / math.sqrt(d)


def _summary_from_logits(logits: np.ndarray, values: np.ndarray, dtype) -> AttentionSummary:
    # logits already scaled, float64.  Single block of the streaming pass.
    mx = float(logits.max())
    w = np.exp(logits - mx)
    z = float(w.sum())
    acc = (w @ values) / z
    s = AttentionSummary(acc=acc, lse=mx + math.log(z), count=logits.shape[0])
    return s if np.dtype(dtype) == np.float64 else s.astype(dtype)


def summarize(
    q: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    *,
    dtype=np.float64,
    block: int = 4096,
) -> AttentionSummary:
    """Stream the tokens in `keys`/`values` into a summary for query `q`.

    Uses an online-softmax running maximum so arbitrarily large logits never
    overflow.  An empty range yields the empty summary.  `dtype` is the
    storage dtype of the result; accumulation is always float64.
    """
    keys = np.asarray(keys)
    values = np.asarray(values)
    if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
        raise ValueError("keys and values must be 2-D with matching row counts")
    n = keys.shape[0]
    if n == 0:
        return empty_summary(values.shape[1], dtype=dtype)
    q64 = np.asarray(q, dtype=np.float64)
    scale = _scale(q64.shape[0])
    if n <= block:
        logits = keys @ q64
        logits = logits.astype(np.float64, copy=False) * scale
        return _summary_from_logits(logits, values, dtype)
    run_m = -math.inf
    run_z = 0.0
    run_s = np.zeros(values.shape[1], dtype=np.float64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        logits = keys[lo:hi] @ q64
        logits = logits.astype(np.float64, copy=False) * scale
        bm = float(logits.max())
        new_m = max(run_m, bm)
        w = np.exp(logits - new_m)
        run_s = run_s * math.exp(run_m - new_m) + w @ values[lo:hi]
        run_z = run_z * math.exp(run_m - new_m) + float(w.sum())
        run_m = new_m
    s = AttentionSummary(acc=run_s / run_z, lse=run_m + math.log(run_z), count=n)
    return s if np.dtype(dtype) == np.float64 else s.astype(dtype)


def merge(a: AttentionSummary, b: AttentionSummary) -> AttentionSummary:
    """Combine summaries over disjoint token sets.

    Commutative and, up to float roundoff, associative.  Merging with the
    empty summary returns the other operand unchanged.
    """
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    out_dtype = np.result_type(a.acc, b.acc)
    lse = float(np.logaddexp(a.lse, b.lse))
    wa = math.exp(a.lse - lse)
    wb = math.exp(b.lse - lse)
    acc = a.acc.astype(np.float64) * wa + b.acc.astype(np.float64) * wb
    s = AttentionSummary(acc=acc, lse=lse, count=a.count + b.count)
    return s if out_dtype == np.float64 else s.astype(out_dtype)


def remove(
    a: AttentionSummary,
    band: AttentionSummary,
    *,
    eps_cancel: float = 1e-6,
) -> AttentionSummary:
    """Down-date: subtract a band that was previously merged into `a`.

    Inverse of merge in exact arithmetic.  Guarded: if the band carries
    essentially all of a's mass (|a.lse - band.lse| < eps_cancel in the log
    domain) the subtraction would cancel catastrophically and
    CancellationError tells the caller to recompute from tokens instead.
    The guard is sign-agnostic: when band and whole were summarized in
    separate passes, roundoff can leave band.lse an ulp above a.lse even
    though the band is a true subset.  Only a band whose mass exceeds the
    whole by more than the guard raises MassExceededError.
    """
    if band.count == 0:
        return a
    if band.count > a.count:
        raise ValueError("band covers more tokens than the summary it is removed from")
    if band.count == a.count:
        if band.lse == a.lse:
            return empty_summary(a.acc.shape[0], dtype=a.acc.dtype)
        raise CancellationError("count would reach zero but band mass differs from the whole")
    diff = a.lse - band.lse
    if diff < -eps_cancel:
        raise MassExceededError("band mass exceeds the summary it is removed from")
    if diff < eps_cancel:
        raise CancellationError(f"residual log-mass {diff:.3e} below cancellation guard {eps_cancel:.1e}")
    out_dtype = np.result_type(a.acc, band.acc)
    lse = band.lse + math.log(math.expm1(diff))
    acc = a.acc.astype(np.float64) * math.exp(a.lse - lse) - band.acc.astype(np.float64) * math.exp(band.lse - lse)
    s = AttentionSummary(acc=acc, lse=lse, count=a.count - band.count)
    return s if out_dtype == np.float64 else s.astype(out_dtype)


def finalize(s: AttentionSummary) -> np.ndarray:
    """Return the attention output the summary represents (its normalized accumulator)."""
    if s.count == 0:
        raise EmptySummaryError("cannot finalize a summary over zero tokens")
    return s.acc


def attend_full(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, AttentionSummary]:
    """Exact attention of `q` over all rows of `keys`/`values`: the fidelity oracle.

    Returns (output, summary).  The decoder's miss path calls exactly this,
    which is what makes miss steps bit-identical to the oracle.
    """
    s = summarize(q, keys, values)
    return finalize(s), s


# --- rotary position embedding ---------------------------------------------


@dataclass(frozen=True)
class RopeTable:
    """Per-pair rotation frequencies: omega_j = base**(-2(j-1)/d) for j = 1..d/2."""

    d: int
    base: float = 10000.0
    freqs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.d < 2 or self.d % 2 != 0:
            raise ValueError(f"rotary embedding needs an even head dim >= 2, got d={self.d}")
        if self.base <= 1.0:
            raise ValueError("rope base must exceed 1")
        j = np.arange(self.d // 2, dtype=np.float64)
        object.__setattr__(self, "freqs", self.base ** (-2.0 * j / self.d))


def rope_rotate(x: np.ndarray, t, table: RopeTable) -> np.ndarray:
    """Rotate adjacent pairs (x[2j], x[2j+1]) by angle freqs[j] * t.

    `x` may be a single vector (d,) or a batch (n, d); `t` is a scalar
    position or an array of per-row positions.  Norm-preserving; returns
    float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != table.d:
        raise ValueError(f"vector dim {x.shape[-1]} does not match table dim {table.d}")
    t = np.asarray(t, dtype=np.float64)
    angles = t[..., None] * table.freqs if t.ndim else t * table.freqs
    c = np.cos(angles)
    s = np.sin(angles)
    pairs = x.reshape(*x.shape[:-1], table.d // 2, 2)
    x0 = pairs[..., 0]
    x1 = pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = x0 * c - x1 * s
    out[..., 1] = x0 * s + x1 * c
    return out.reshape(x.shape)


def avg_cos(x: np.ndarray, delta, table: RopeTable) -> float:
    """Energy-weighted mean of cos(freqs[j] * delta) over the pair subspaces of x.

    Satisfies ||x - R(delta) x||^2 == 2 ||x||^2 (1 - avg_cos(x, delta))
    exactly, which is what makes it a per-vector rotation-sensitivity score.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (table.d,):
        raise ValueError(f"expected a single vector of dim {table.d}")
    pairs = x.reshape(table.d // 2, 2)
    w = pairs[:, 0] ** 2 + pairs[:, 1] ** 2
    total = float(w.sum())
    if total == 0.0:
        raise ValueError("avg_cos is undefined for the zero vector")
    return float(np.cos(table.freqs * float(delta)) @ w / total)
