"""Nearest-neighbor matching of the current query against a ring of recent queries.

Matching happens on pre-rotation queries by default: two queries that repeat
at different positions are near-identical before the position rotation is
applied, while their rotated forms drift apart with the position gap.  A
post-rotation mode exists as an ablation; it rotates each candidate into the
current query's frame before measuring distance.

The acceptance radius sqrt(2 d) (1 - tau) comes from calibrating against the
null hypothesis of two independent standard Gaussian queries, whose squared
distance is 2 x chi-square(d).  `calibrate_tau` inverts that relationship to
hit a requested false-positive rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .attention import RopeTable

MATCH_PRE_ROPE = "pre_rope"
MATCH_POST_ROPE = "post_rope"


@dataclass
class MatchConfig:
    d: int
    tau: float = 0.45
    delta_max: int | None = None
    space: str = MATCH_PRE_ROPE
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("head dim must be positive")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.delta_max is not None and self.delta_max < 1:
            raise ValueError("delta_max must be >= 1 when set")
        if self.space not in (MATCH_PRE_ROPE, MATCH_POST_ROPE):
            raise ValueError(f"unknown match space {self.space!r}")


@dataclass(frozen=True)
class MatchResult:
    hit: bool
    p: int
    sq_dist: float
    candidates_scanned: int

    MISS_POS = -1


def threshold(d: int, tau: float) -> float:
    """Acceptance radius sqrt(2 d) * (1 - tau)."""
    if d < 1:
        raise ValueError("head dim must be positive")
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    return math.sqrt(2.0 * d) * (1.0 - tau)


class QueryRing:
    """Fixed-capacity ring of the K most recent pre-rotation queries.

    Entries carry (position, query, cached squared norm).  Positions must be
    pushed in strictly increasing order; once full, each push overwrites the
    oldest entry in place, so a position's slot is (pos - 1) mod K whenever
    pushes happen once per decode step.  Single-writer; no locking.
    """

    def __init__(self, capacity: int, d: int):
        if capacity < 1:
            raise ValueError("ring capacity must be >= 1")
        self.capacity = capacity
        self.d = d
        self._q = np.zeros((capacity, d), dtype=np.float64)
        self._sqnorm = np.zeros(capacity, dtype=np.float64)
        self._pos = np.zeros(capacity, dtype=np.int64)
        self._count = 0

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    @property
    def last_position(self) -> int:
        if self._count == 0:
            return 0
        return int(self._pos[(self._count - 1) % self.capacity])

    def push(self, pos: int, q: np.ndarray):
        """Append an entry; returns the evicted (pos, query, sq_norm) or None."""
        if pos < 1:
            raise ValueError("positions are 1-based")
        if self._count and pos <= self.last_position:
            raise ValueError(f"ring positions must increase: got {pos} after {self.last_position}")
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.d,):
            raise ValueError(f"expected query of dim {self.d}, got shape {q.shape}")
        slot = self._count % self.capacity
        evicted = None
        if self._count >= self.capacity:
            evicted = (int(self._pos[slot]), self._q[slot].copy(), float(self._sqnorm[slot]))
        self._q[slot] = q
        self._sqnorm[slot] = float(q @ q)
        self._pos[slot] = pos
        self._count += 1
        return evicted

    def view(self):
        """(queries, sq_norms, positions) views over the live entries."""
        n = len(self)
        return self._q[:n], self._sqnorm[:n], self._pos[:n]

    def slot_of(self, pos: int) -> int:
        slot = (pos - 1) % self.capacity
        if len(self) == 0 or self._pos[slot] != pos:
            raise KeyError(f"position {pos} is not in the ring")
        return slot

    def query_at(self, pos: int) -> np.ndarray:
        return self._q[self.slot_of(pos)]


def _rotate_rows(rows: np.ndarray, deltas: np.ndarray, table: RopeTable) -> np.ndarray:
    # R(delta) applied per row; same pairing as rope_rotate, deltas may be negative.
    angles = deltas[:, None] * table.freqs
    c = np.cos(angles)
    s = np.sin(angles)
    pairs = rows.reshape(rows.shape[0], -1, 2)
    out = np.empty_like(pairs)
    out[..., 0] = pairs[..., 0] * c - pairs[..., 1] * s
    out[..., 1] = pairs[..., 0] * s + pairs[..., 1] * c
    return out.reshape(rows.shape)


def match_query(q: np.ndarray, m: int, ring: QueryRing, cfg: MatchConfig) -> MatchResult:
    """Scan the ring for the nearest stored query; accept if inside the radius.

    Distances use ||a||^2 + ||b||^2 - 2 a.b with the ring's cached norms (two
    inner products per candidate, no per-candidate difference vectors).
    Tie-break on equal distance prefers the most recent position.  In
    post_rope mode each candidate at position p is first rotated into the
    query's frame (the inverse of the p -> m rotation), so distances equal
    ||R(m) q - R(p) q_p||.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (ring.d,):
        raise ValueError(f"expected query of dim {ring.d}, got shape {q.shape}")
    n = len(ring)
    if n and ring.last_position >= m:
        raise ValueError("all ring entries must precede the current position")
    if n == 0:
        return MatchResult(False, MatchResult.MISS_POS, math.inf, 0)
    cand, sqnorm, pos = ring.view()
    if cfg.delta_max is not None:
        keep = (m - pos) <= cfg.delta_max
        if not keep.any():
            return MatchResult(False, MatchResult.MISS_POS, math.inf, 0)
        cand, sqnorm, pos = cand[keep], sqnorm[keep], pos[keep]
    if cfg.space == MATCH_POST_ROPE:
        # rotation is orthogonal, so the cached norms stay valid
        table = RopeTable(d=cfg.d, base=cfg.rope_base)
        cand = _rotate_rows(cand, (pos - m).astype(np.float64), table)
    sq = float(q @ q) + sqnorm - 2.0 * (cand @ q)
    np.maximum(sq, 0.0, out=sq)
    best = sq.min()
    ties = np.flatnonzero(sq == best)
    p = int(pos[ties].max())
    hit = bool(best < threshold(cfg.d, cfg.tau) ** 2)
    return MatchResult(hit, p if hit else MatchResult.MISS_POS, float(best), int(pos.shape[0]))


def chi2_cdf(d: int, x: float) -> float:
    """Chi-square CDF with d degrees of freedom: P(d/2, x/2) (regularized lower gamma)."""
    if d < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if x < 0:
        raise ValueError("chi-square CDF argument must be >= 0")
    return float(special.gammainc(d / 2.0, x / 2.0))


def calibrate_tau(d: int, alpha: float) -> float:
    """Pick tau so two independent Gaussian queries collide with probability alpha.

    Inverts alpha = F_chi2_d(d (1 - tau)^2) on the monotone CDF.  tau is
    clamped at 0: alphas above F_chi2_d(d) are unreachable inside [0, 1) and
    the radius saturates at the random-coincidence baseline sqrt(2 d).
    """
    if d < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    x = 2.0 * float(special.gammaincinv(d / 2.0, alpha))
    return max(0.0, 1.0 - math.sqrt(x / d))
