"""Static planner for spreading per-head KV-read spans across parallel workers.

Each item's span quantizes to ceil(span/tile) tiles.  Tiles of one item may
split across workers, but only when the item exceeds the ideal per-worker
share ceil(total/workers); splitting everything would hide the granularity
the tile models.  Chunks then go longest-first onto the least-loaded
worker.  Splitting only relaxes the atomic problem, so the classic
longest-first ceiling (makespan <= (4/3 - 1/(3W)) * optimal) still holds
against the atomic brute-force optimum.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

DEFAULT_TILE = 64  # tokens per schedulable tile


@dataclass(frozen=True)
class WorkItem:
    """One (request, head) span of band+tail tokens to attend."""

    id: object
    span: int

    def __post_init__(self):
        if self.span < 0:
            raise ValueError(f"span must be >= 0, got {self.span}")


@dataclass(frozen=True)
class Plan:
    assignments: tuple[tuple[int, ...], ...]  # per worker: tile counts of its chunks
    makespan: int
    total: int
    workers: int
    tile: int

    @property
    def loads(self) -> tuple[int, ...]:
        return tuple(sum(chunks) for chunks in self.assignments)


def _as_items(items) -> list[WorkItem]:
    out = []
    for i, it in enumerate(items):
        out.append(it if isinstance(it, WorkItem) else WorkItem(id=i, span=int(it)))
    if not out:
        raise ValueError("need at least one work item")
    return out


def _tiles(items, tile: int) -> list[int]:
    if tile < 1:
        raise ValueError("tile must be >= 1")
    return [-(-it.span // tile) for it in _as_items(items)]


def _chunks(tiles: int, cap: int) -> list[int]:
    # fewest pieces that respect the cap, sized as evenly as possible
    k = -(-tiles // cap)
    q, r = divmod(tiles, k)
    return [q + 1] * r + [q] * (k - r)


def plan_lpt(items, tile: int, workers: int) -> Plan:
    """Split oversized items, then assign chunks longest-first to the least-loaded worker.

    Deterministic: equal-size chunks keep item order, and load ties go to
    the lowest worker index.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    tiles = _tiles(items, tile)
    total = sum(tiles)
    cap = max(1, -(-total // workers))
    pieces = []
    for t in tiles:
        if t:
            pieces.extend(_chunks(t, cap))
    pieces.sort(reverse=True)
    heap = [(0, w) for w in range(workers)]
    buckets: list[list[int]] = [[] for _ in range(workers)]
    loads = [0] * workers
    for piece in pieces:
        load, w = heapq.heappop(heap)
        buckets[w].append(piece)
        loads[w] = load + piece
        heapq.heappush(heap, (loads[w], w))
    return Plan(
        assignments=tuple(tuple(b) for b in buckets),
        makespan=max(loads),
        total=total,
        workers=workers,
        tile=tile,
    )


def perfect_makespan(items, tile: int, workers: int) -> int:
    """Fractional lower bound: the ideal share ceil(total_tiles / workers)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return -(-sum(_tiles(items, tile)) // workers)


def naive_makespan(items, tile: int, workers: int) -> int:
    """Round-robin whole items in arrival order; the unbalanced baseline."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    loads = [0] * workers
    for i, t in enumerate(_tiles(items, tile)):
        loads[i % workers] += t
    return max(loads)


def baselines(items, tile: int, workers: int) -> tuple[int, int]:
    """(perfect, naive) reference makespans for the same instance."""
    return perfect_makespan(items, tile, workers), naive_makespan(items, tile, workers)


def optimal_makespan(items, tile: int, workers: int, max_items: int = 12) -> int:
    """Exact atomic optimum by branch and bound; only for small instances."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    tiles = sorted(_tiles(items, tile), reverse=True)
    if len(tiles) > max_items:
        raise ValueError(f"brute force capped at {max_items} items, got {len(tiles)}")
    total = sum(tiles)
    if total == 0:
        return 0
    best = total  # everything on one worker always works
    lower = max(-(-total // workers), tiles[0])
    loads = [0] * workers

    def dfs(i: int):
        nonlocal best
        if best == lower:
            return
        if i == len(tiles):
            best = min(best, max(loads))
            return
        seen = set()
        for w in range(workers):
            if loads[w] in seen:  # identical loads are symmetric
                continue
            seen.add(loads[w])
            if loads[w] + tiles[i] >= best:
                continue
            loads[w] += tiles[i]
            dfs(i + 1)
            loads[w] -= tiles[i]

    dfs(0)
    return best


def gen_skewed_spans(n: int, mean_span: float, sigma: float, seed: int) -> list[WorkItem]:
    """Lognormal spans with E[span] ~= mean_span; sigma = 0 gives all-equal spans."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mean_span <= 0 or sigma < 0:
        raise ValueError("mean_span must be positive and sigma non-negative")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    raw = mean_span * np.exp(sigma * z - 0.5 * sigma * sigma)
    spans = np.maximum(1, np.rint(raw)).astype(np.int64)
    return [WorkItem(id=i, span=int(s)) for i, s in enumerate(spans)]
