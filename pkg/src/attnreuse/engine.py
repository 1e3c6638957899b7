"""Decode pipeline that reuses cached attention state across repeated queries.

Per decode step and query head: look up the nearest recent query in a ring
(pre-rotation space).  On a hit at position p, reuse that entry's stored
summary over tokens [1, p-r], recompute only the suffix [p-r+1, m] split at
m-r, merge, and finalize.  On a miss, run exact attention over [1, m]; the
miss path's output comes from the very same call the fidelity oracle uses,
so miss steps are bit-identical to full attention.  Either way the step
stores a new ring entry: the pre-rotation query plus a summary covering
[1, m-r], leaving the last r tokens (the band) to be recomputed by whoever
reuses the entry later.

Accounting: every (step, layer, query head) match decision contributes one
record; kv_fraction is tokens actually read over tokens full attention would
read.  All error measurement lives behind oracle_mode and never touches the
reported traffic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionSummary,
    CancellationError,
    RopeTable,
    attend_full,
    empty_summary,
    finalize,
    merge,
    remove,
    rope_rotate,
    summarize,
)
from .kvstore import KvStore, TrafficCounter
from .matching import MATCH_PRE_ROPE, MatchConfig, MatchResult, QueryRing, match_query

DOWNDATE_SPLIT = "split"
DOWNDATE_REMOVE = "remove"


@dataclass(frozen=True)
class ByteCostModel:
    """Bytes per cached token read in attention (b_kv) and per candidate scanned in matching (b_q)."""

    b_kv: float
    b_q: float

    def __post_init__(self):
        if self.b_kv < 0 or self.b_q < 0:
            raise ValueError("byte costs must be non-negative")


def break_even_gate(p: int, band: int, window: int, costs: ByteCostModel) -> bool:
    """True when reusing a hit at p saves at least as many bytes as matching spends.

    Reuse skips p tokens of attention traffic but pays for the ring scan and
    the band recompute: p * b_kv >= window * b_q + band * b_kv.
    """
    return p * costs.b_kv >= window * costs.b_q + band * costs.b_kv


def group_kv_span(matches, m: int, band: int) -> int:
    """Physical KV rows a shared-KV head group streams at step m.

    Heads in one group share the KV rows, so the group reads back to the
    shallowest reuse point: m - min over heads of (p - band)+, with misses
    contributing 0 (full span).
    """
    matches = list(matches)
    if not matches:
        raise ValueError("group_kv_span needs at least one head")
    floor = min((max(mr.p - band, 0) if mr.hit else 0) for mr in matches)
    return m - floor


def aux_overhead_ratio(cfg: "EngineConfig", seq_len: int) -> float:
    """Ring-state size relative to the KV cache at context length seq_len.

    Per query head each ring entry stores a d-dim query, a d_v-dim summary
    accumulator, and two scalars (log-sum-exp, position); the KV cache
    stores 2d per kv head per token.  Bytes cancel.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    num = cfg.window * cfg.n_q_heads * (cfg.d + cfg.d_v + 2)
    den = seq_len * cfg.n_kv_heads * 2 * cfg.d
    return num / den


def aux_overhead_rule_of_thumb(window: int, seq_len: int) -> float:
    """Published sizing rule: 5% of the KV cache at window 1024 and 120k context."""
    if window < 0 or seq_len < 1:
        raise ValueError("window must be >= 0 and seq_len >= 1")
    return 0.05 * (window / 1024.0) * (120_000.0 / seq_len)


def fidelity_efficiency(err_mean: float, kv_fraction: float) -> float:
    """(1 - clamp(err, 0, 1)) / kv_fraction: fidelity retained per unit of traffic."""
    if kv_fraction <= 0:
        raise ValueError("kv_fraction must be positive")
    return (1.0 - min(max(err_mean, 0.0), 1.0)) / kv_fraction


@dataclass
class EngineConfig:
    d: int
    d_v: int
    n_layers: int = 1
    n_q_heads: int = 1
    n_kv_heads: int = 1
    window: int = 1024
    band: int = 256
    tau: float = 0.45
    tau_per_layer: tuple[float, ...] | None = None
    delta_max: int | None = None
    match_space: str = MATCH_PRE_ROPE
    rope_base: float = 10000.0
    storage: str = "f32"
    oracle_mode: bool = False
    roi_gate: bool = False
    economics: ByteCostModel | None = None
    downdate_mode: str = DOWNDATE_SPLIT
    refresh_every: int = 0
    mass_check: bool = False
    page_size: int = 16

    def __post_init__(self):
        if self.d < 2 or self.d % 2:
            raise ValueError(f"head dim must be even and >= 2 (rotary pairs), got {self.d}")
        if self.d_v < 1:
            raise ValueError("value dim must be >= 1")
        if self.n_layers < 1 or self.n_q_heads < 1 or self.n_kv_heads < 1:
            raise ValueError("layer and head counts must be >= 1")
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if self.window < 1:
            raise ValueError("ring window must be >= 1")
        if self.band < 0:
            raise ValueError("band must be >= 0")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.tau_per_layer is not None:
            self.tau_per_layer = tuple(self.tau_per_layer)
            if len(self.tau_per_layer) != self.n_layers:
                raise ValueError("tau_per_layer must list one tau per layer")
            if any(not 0.0 <= t < 1.0 for t in self.tau_per_layer):
                raise ValueError("per-layer taus must lie in [0, 1)")
        if self.storage not in ("f32", "f64"):
            raise ValueError(f"storage must be 'f32' or 'f64', got {self.storage!r}")
        if self.downdate_mode not in (DOWNDATE_SPLIT, DOWNDATE_REMOVE):
            raise ValueError(f"unknown downdate mode {self.downdate_mode!r}")
        if self.refresh_every < 0:
            raise ValueError("refresh_every must be >= 0 (0 disables)")

    @property
    def storage_dtype(self):
        return np.float32 if self.storage == "f32" else np.float64

    def tau_for(self, layer: int) -> float:
        return self.tau_per_layer[layer] if self.tau_per_layer is not None else self.tau


@dataclass
class DecodeMetrics:
    """Accumulator over per-(step, layer, query head) match decisions."""

    steps: int = 0
    hits: int = 0
    fallbacks: int = 0
    forced_misses: int = 0
    skip_sum: float = 0.0
    kv_tokens_read: int = 0
    kv_tokens_full: int = 0
    kv_bytes: float = 0.0
    match_candidates: int = 0
    match_bytes: float = 0.0
    group_kv_tokens: int = 0
    group_kv_total: int = 0
    err_samples: list = field(default_factory=list)
    band_mass_samples: list = field(default_factory=list)
    delta_gaps: list = field(default_factory=list)
    mass_bound_samples: list = field(default_factory=list)

    def record_hit(self, m: int, p: int, band: int, kv_cost: float = 0.0) -> int:
        """Account one accepted reuse; returns the tokens read."""
        skipped = max(p - band, 0)
        tokens = m - skipped
        self.steps += 1
        self.hits += 1
        self.skip_sum += skipped / m
        self.kv_tokens_read += tokens
        self.kv_tokens_full += m
        self.kv_bytes += tokens * kv_cost
        self.delta_gaps.append(m - p)
        return tokens

    def record_miss(self, m: int, kv_cost: float = 0.0):
        self.steps += 1
        self.kv_tokens_read += m
        self.kv_tokens_full += m
        self.kv_bytes += m * kv_cost

    def merge(self, other: "DecodeMetrics"):
        self.steps += other.steps
        self.hits += other.hits
        self.fallbacks += other.fallbacks
        self.forced_misses += other.forced_misses
        self.skip_sum += other.skip_sum
        self.kv_tokens_read += other.kv_tokens_read
        self.kv_tokens_full += other.kv_tokens_full
        self.kv_bytes += other.kv_bytes
        self.match_candidates += other.match_candidates
        self.match_bytes += other.match_bytes
        self.group_kv_tokens += other.group_kv_tokens
        self.group_kv_total += other.group_kv_total
        self.err_samples.extend(other.err_samples)
        self.band_mass_samples.extend(other.band_mass_samples)
        self.delta_gaps.extend(other.delta_gaps)
        self.mass_bound_samples.extend(other.mass_bound_samples)


def compute_metrics(metrics: DecodeMetrics) -> dict:
    """Fold the accumulator into the stable report schema (JSON-ready dict)."""
    if metrics.steps < 1:
        raise ValueError("metrics cover zero decisions")
    errs = np.asarray(metrics.err_samples, dtype=np.float64) if metrics.err_samples else None
    return {
        "schema_version": 1,
        "steps": metrics.steps,
        "hits": metrics.hits,
        "acceptance_rate": metrics.hits / metrics.steps,
        "skip_ratio": metrics.skip_sum / metrics.steps,
        "kv_fraction": metrics.kv_tokens_read / metrics.kv_tokens_full,
        "err_mean": float(errs.mean()) if errs is not None else None,
        "err_p50": float(np.percentile(errs, 50)) if errs is not None else None,
        "err_p99": float(np.percentile(errs, 99)) if errs is not None else None,
        "mean_gap": float(np.mean(metrics.delta_gaps)) if metrics.delta_gaps else None,
        "mean_band_mass": float(np.mean(metrics.band_mass_samples)) if metrics.band_mass_samples else None,
    }


def mass_bound_check(
    q_m: np.ndarray,
    q_p: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    band: int,
) -> tuple[float, float]:
    """Compare the reused non-band prefix contribution against its analytic bound.

    Both queries are post-rotation; keys/values cover tokens [1, p] at the
    hit's creation position.  With alpha the softmax of the creating query
    over [1, p], rho the band's share of that mass, and dl the worst logit
    drift outside the band, the bound is (e^dl - 1)(1 - rho) E[||v||].
    Returns (lhs, rhs); a fraction of steps with lhs <= rhs near 1 means the
    stored prefixes stay trustworthy.
    """
    p = keys.shape[0]
    if p < 1:
        raise ValueError("mass_bound_check needs at least one token")
    scale = 1.0 / math.sqrt(q_m.shape[0])
    lp = (keys @ np.asarray(q_p, dtype=np.float64)) * scale
    lm = (keys @ np.asarray(q_m, dtype=np.float64)) * scale
    ap = np.exp(lp - lp.max())
    ap /= ap.sum()
    am = np.exp(lm - lm.max())
    am /= am.sum()
    cut = max(0, p - band)
    rho = float(ap[cut:].sum())
    if cut == 0:
        return 0.0, 0.0
    lhs = float(np.linalg.norm(ap[:cut] @ values[:cut] - am[:cut] @ values[:cut]))
    dl = float(np.abs(lm[:cut] - lp[:cut]).max())
    prefix_mass = float(ap[:cut].sum())
    ev = float(ap[:cut] @ np.linalg.norm(values[:cut], axis=1)) / prefix_mass if prefix_mass > 0 else 0.0
    rhs = math.expm1(dl) * (1.0 - rho) * ev
    return lhs, rhs


class SummaryRing:
    """Stored prefix summaries, slot-aligned with the query ring."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("ring capacity must be >= 1")
        self.capacity = capacity
        self._items: list[AttentionSummary | None] = [None] * capacity
        self._pos = np.zeros(capacity, dtype=np.int64)
        self._count = 0

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    @property
    def last_position(self) -> int:
        if self._count == 0:
            return 0
        return int(self._pos[(self._count - 1) % self.capacity])

    def push(self, pos: int, summary: AttentionSummary):
        if self._count and pos <= self.last_position:
            raise ValueError(f"ring positions must increase: got {pos} after {self.last_position}")
        slot = self._count % self.capacity
        evicted = None
        if self._count >= self.capacity:
            evicted = (int(self._pos[slot]), self._items[slot])
        self._items[slot] = summary
        self._pos[slot] = pos
        self._count += 1
        return evicted

    def summary_at(self, pos: int) -> AttentionSummary:
        slot = (pos - 1) % self.capacity
        if len(self) == 0 or self._pos[slot] != pos or self._items[slot] is None:
            raise KeyError(f"position {pos} is not in the ring")
        return self._items[slot]


@dataclass
class StepResult:
    outputs: np.ndarray
    matches: tuple[MatchResult, ...]
    full_summaries: tuple[AttentionSummary, ...]
    cached_summaries: tuple[AttentionSummary | None, ...]
    band_masses: tuple[float, ...]
    errs: tuple[float, ...] | None
    delta: DecodeMetrics


class DecodeEngine:
    """Single-request decoder state: KV store, per-(layer, head) rings, metrics."""

    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.rope = RopeTable(cfg.d, cfg.rope_base)
        isize = 4 if cfg.storage == "f32" else 8
        self.costs = cfg.economics if cfg.economics is not None else ByteCostModel(
            b_kv=(cfg.d + cfg.d_v) * isize, b_q=cfg.d * isize
        )
        self.store = KvStore(
            cfg.d,
            cfg.d_v,
            page_size=cfg.page_size,
            storage_dtype=cfg.storage_dtype,
        )
        self.traffic = TrafficCounter()
        self.oracle_traffic = TrafficCounter()  # measurement reads, never reported
        self.metrics = DecodeMetrics()
        self._match_cfg = [
            MatchConfig(
                d=cfg.d,
                tau=cfg.tau_for(layer),
                delta_max=cfg.delta_max,
                space=cfg.match_space,
                rope_base=cfg.rope_base,
            )
            for layer in range(cfg.n_layers)
        ]
        self._rings = {
            (layer, head): (QueryRing(cfg.window, cfg.d), SummaryRing(cfg.window))
            for layer in range(cfg.n_layers)
            for head in range(cfg.n_q_heads)
        }
        self._group = cfg.n_q_heads // cfg.n_kv_heads
        self._empty = empty_summary(cfg.d_v)

    def rings(self, layer: int, head: int) -> tuple[QueryRing, SummaryRing]:
        return self._rings[(layer, head)]

    def rectify_append(
        self,
        layer: int,
        head: int,
        m: int,
        q_pre: np.ndarray,
        full: AttentionSummary,
        band: AttentionSummary,
        prefix: AttentionSummary,
    ):
        """Push the step's ring entry: pre-rotation query + prefix summary over [1, m-r].

        The caller guarantees full == merge(prefix, band) up to roundoff;
        non-increasing positions are rejected by the rings themselves.
        """
        cfg = self.cfg
        if full.count != m:
            raise ValueError(f"full summary covers {full.count} tokens, expected {m}")
        if prefix.count != max(0, m - cfg.band):
            raise ValueError(
                f"prefix summary covers {prefix.count} tokens, expected {max(0, m - cfg.band)}"
            )
        q_store = np.asarray(q_pre, dtype=np.float64)
        if cfg.storage == "f32":
            q_store = q_store.astype(np.float32).astype(np.float64)
            prefix = prefix.astype(np.float32)
        ring_q, ring_s = self._rings[(layer, head)]
        ring_q.push(m, q_store)
        ring_s.push(m, prefix)

    def _attend_span(self, q_rot, keys, vals, n1):
        """Summaries over keys[:n1] and keys[n1:] as two independent calls."""
        piece = summarize(q_rot, keys[:n1], vals[:n1]) if n1 > 0 else self._empty
        rest = summarize(q_rot, keys[n1:], vals[n1:]) if n1 < keys.shape[0] else self._empty
        return piece, rest

    def decode_step(
        self,
        layer: int,
        q_pre: np.ndarray,
        k_pre: np.ndarray,
        v: np.ndarray,
        m: int,
        oracle_rows: np.ndarray | None = None,
    ) -> StepResult:
        """Advance one token: append KV, then match/reuse or recompute per query head.

        `oracle_rows` optionally supplies precomputed full-attention outputs
        (one per query head) so measurement runs can skip the per-step
        oracle; without it, oracle_mode computes the reference in place.
        """
        cfg = self.cfg
        r = cfg.band
        q_pre = np.asarray(q_pre, dtype=np.float64)
        k_pre = np.asarray(k_pre, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if q_pre.shape != (cfg.n_q_heads, cfg.d):
            raise ValueError(f"expected queries ({cfg.n_q_heads}, {cfg.d}), got {q_pre.shape}")
        if k_pre.shape != (cfg.n_kv_heads, cfg.d) or v.shape != (cfg.n_kv_heads, cfg.d_v):
            raise ValueError("key/value shapes do not match the configured kv heads")
        for j in range(cfg.n_kv_heads):
            pos = self.store.append(layer, j, rope_rotate(k_pre[j], float(m), self.rope), v[j])
            if pos != m:
                raise ValueError(f"steps must be consecutive: store is at {pos}, step is {m}")

        delta = DecodeMetrics()
        outputs = np.empty((cfg.n_q_heads, cfg.d_v), dtype=np.float64)
        matches: list[MatchResult] = []
        fulls: list[AttentionSummary] = []
        cacheds: list[AttentionSummary | None] = []
        masses: list[float] = []
        errs: list[float] | None = [] if cfg.oracle_mode else None

        for h in range(cfg.n_q_heads):
            ring_q, ring_s = self._rings[(layer, h)]
            mres = match_query(q_pre[h], m, ring_q, self._match_cfg[layer])
            delta.match_candidates += mres.candidates_scanned
            delta.match_bytes += mres.candidates_scanned * self.costs.b_q
            use_hit = mres.hit
            if use_hit and cfg.roi_gate and not break_even_gate(mres.p, r, cfg.window, self.costs):
                use_hit = False
                delta.forced_misses += 1
            if cfg.refresh_every and m % cfg.refresh_every == 0:
                if use_hit:
                    delta.forced_misses += 1
                use_hit = False
            q_rot = rope_rotate(q_pre[h], float(m), self.rope)
            kv_head = h // self._group
            cached: AttentionSummary | None = None

            if use_hit:
                p = mres.p
                lo = max(1, p - r + 1)
                keys, vals = self.store.read_range(layer, kv_head, (lo, m), self.traffic)
                cached = ring_s.summary_at(p)
                n1 = max(0, (m - r) - lo + 1)
                piece1, band_sum = self._attend_span(q_rot, keys, vals, n1)
                prefix = merge(cached, piece1)
                full = merge(prefix, band_sum)
                out = finalize(full)
                if cfg.downdate_mode == DOWNDATE_REMOVE and band_sum.count:
                    try:
                        prefix = remove(full, band_sum)
                    except CancellationError:
                        delta.fallbacks += 1  # keep the split-form prefix
                delta.record_hit(m, p, r, self.costs.b_kv)
                if cfg.mass_check and cfg.oracle_mode:
                    pk, pv = self.store.read_range(layer, kv_head, (1, p), self.oracle_traffic)
                    q_p_rot = rope_rotate(ring_q.query_at(p), float(p), self.rope)
                    delta.mass_bound_samples.append(mass_bound_check(q_rot, q_p_rot, pk, pv, r))
            else:
                keys, vals = self.store.read_range(layer, kv_head, (1, m), self.traffic)
                out, full = attend_full(q_rot, keys, vals)
                mid = max(0, m - r)
                if r == 0:
                    prefix, band_sum = full, self._empty
                elif mid == 0:
                    prefix, band_sum = self._empty, full
                else:
                    prefix, band_sum = self._attend_span(q_rot, keys, vals, mid)
                if cfg.downdate_mode == DOWNDATE_REMOVE and band_sum.count and prefix.count:
                    try:
                        prefix = remove(full, band_sum)
                    except CancellationError:
                        delta.fallbacks += 1
                delta.record_miss(m, self.costs.b_kv)

            rho = math.exp(band_sum.lse - full.lse) if band_sum.count else 0.0
            self.rectify_append(layer, h, m, q_pre[h], full, band_sum, prefix)

            if errs is not None:
                if oracle_rows is not None:
                    ref = np.asarray(oracle_rows[h], dtype=np.float64)
                elif use_hit:
                    ok, ov = self.store.read_range(layer, kv_head, (1, m), self.oracle_traffic)
                    ref, _ = attend_full(q_rot, ok, ov)
                else:
                    ref = out  # the miss path just ran exactly this computation
                num = float(np.linalg.norm(out - ref))
                den = float(np.linalg.norm(ref))
                err = 0.0 if num == 0.0 else (math.inf if den == 0.0 else num / den)
                errs.append(err)
                delta.err_samples.append(err)

            outputs[h] = out
            matches.append(mres)
            fulls.append(full)
            cacheds.append(cached)
            masses.append(rho)
            delta.band_mass_samples.append(rho)

        for g in range(cfg.n_kv_heads):
            span = group_kv_span(matches[g * self._group : (g + 1) * self._group], m, r)
            delta.group_kv_tokens += span
            delta.group_kv_total += m

        self.metrics.merge(delta)
        return StepResult(
            outputs=outputs,
            matches=tuple(matches),
            full_summaries=tuple(fulls),
            cached_summaries=tuple(cacheds),
            band_masses=tuple(masses),
            errs=tuple(errs) if errs is not None else None,
            delta=delta,
        )


def oracle_outputs(trace, cfg: EngineConfig, *, chunk: int = 256) -> np.ndarray:
    """Vectorized full-attention outputs for every (layer, step, query head).

    Replicates the engine's storage semantics (rotate keys, then round
    through the storage dtype) so the reference differs from the per-step
    oracle only by float reduction order.  Returns (n_layers, L, H, d_v).
    """
    table = RopeTable(cfg.d, cfg.rope_base)
    L = int(trace.seq_len)
    positions = np.arange(1, L + 1, dtype=np.float64)
    scale = 1.0 / math.sqrt(cfg.d)
    out = np.empty((cfg.n_layers, L, cfg.n_q_heads, cfg.d_v), dtype=np.float64)
    group = cfg.n_q_heads // cfg.n_kv_heads
    for layer in range(cfg.n_layers):
        for j in range(cfg.n_kv_heads):
            k_rot = rope_rotate(np.asarray(trace.k_pre[:, layer, j, :], dtype=np.float64), positions, table)
            v_all = np.asarray(trace.v[:, layer, j, :], dtype=np.float64)
            if cfg.storage == "f32":
                k_rot = k_rot.astype(np.float32).astype(np.float64)
                v_all = v_all.astype(np.float32).astype(np.float64)
            for h in range(j * group, (j + 1) * group):
                q_rot = rope_rotate(np.asarray(trace.q_pre[:, layer, h, :], dtype=np.float64), positions, table)
                for lo in range(0, L, chunk):
                    hi = min(lo + chunk, L)
                    logits = (q_rot[lo:hi] @ k_rot[:hi].T) * scale
                    cols = np.arange(hi)
                    logits[cols[None, :] > (lo + np.arange(hi - lo))[:, None]] = -np.inf
                    logits -= logits.max(axis=1, keepdims=True)
                    w = np.exp(logits)
                    out[layer, lo:hi, h, :] = (w @ v_all[:hi]) / w.sum(axis=1, keepdims=True)
    return out


def run_decode(trace, cfg: EngineConfig, *, per_step_oracle: bool = False, on_step=None) -> DecodeEngine:
    """Drive a full trace through a fresh engine; returns the engine with its metrics.

    With oracle_mode on, the reference stream is precomputed in one
    vectorized pass unless per_step_oracle is set, in which case each step
    computes its own reference (and miss steps are bit-identical to it).
    """
    if (trace.d, trace.d_v, trace.n_layers, trace.n_q_heads, trace.n_kv_heads) != (
        cfg.d,
        cfg.d_v,
        cfg.n_layers,
        cfg.n_q_heads,
        cfg.n_kv_heads,
    ):
        raise ValueError("trace dimensions do not match the engine config")
    engine = DecodeEngine(cfg)
    oracle = None
    if cfg.oracle_mode and not per_step_oracle:
        oracle = oracle_outputs(trace, cfg)
    for m in range(1, int(trace.seq_len) + 1):
        for layer in range(cfg.n_layers):
            rows = oracle[layer, m - 1] if oracle is not None else None
            res = engine.decode_step(
                layer,
                trace.q_pre[m - 1, layer],
                trace.k_pre[m - 1, layer],
                trace.v[m - 1, layer],
                m,
                oracle_rows=rows,
            )
            if on_step is not None:
                on_step(m, layer, res)
    return engine
