"""Optimal-routing supervision: hop distances to the true nearest neighbor.

For each training query the cache keeps, for every vertex lying on some
entry-to-v* path at most ``m`` hops longer than the shortest one, the
number of hops from that vertex to v*. ``ref_set`` answers "which heap
members are hop-closest to v*" from that cache.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import FormatError
from .graph import SimilarityGraph, bfs_hops

log = logging.getLogger(__name__)

CACHE_MAGIC = b"HOPC"
CACHE_VERSION = 1
DEFAULT_SLACK = 5


class UnreachableTarget(RuntimeError):
    pass


@dataclass(eq=False)
class HopCacheEntry:
    query_id: int
    v_star: int
    vertices: np.ndarray  # sorted ascending
    hops: np.ndarray  # hops from vertices[i] to v_star
    _dense: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int32)
        self.hops = np.asarray(self.hops, dtype=np.int32)

    def hops_to_target(self) -> dict[int, int]:
        return dict(zip(self.vertices.tolist(), self.hops.tolist()))

    def dense(self, n: int) -> np.ndarray:
        """Length-``n`` array of cached hop counts, -1 where uncached."""
        if self._dense is None or self._dense.size != n:
            d = np.full(n, -1, dtype=np.int32)
            d[self.vertices] = self.hops
            self._dense = d
        return self._dense

    def __eq__(self, other):
        return (isinstance(other, HopCacheEntry) and self.query_id == other.query_id
                and self.v_star == other.v_star
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.hops, other.hops))


@dataclass
class HopCache:
    m: int
    entries: dict[int, HopCacheEntry]
    excluded: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, query_id: int) -> HopCacheEntry:
        return self.entries[query_id]

    def __contains__(self, query_id: int) -> bool:
        return query_id in self.entries


def select_vertices(from_entry: np.ndarray, to_target: np.ndarray, v_star: int, m: int) -> np.ndarray:
    reach = (from_entry >= 0) & (to_target >= 0)
    limit = from_entry[v_star] + m
    return np.flatnonzero(reach & (from_entry + to_target <= limit))


def precompute_entry(graph: SimilarityGraph, query_id: int, v_star: int, m: int = DEFAULT_SLACK,
                     from_entry: np.ndarray | None = None) -> HopCacheEntry:
    """Cache the hop distance to ``v_star`` for every vertex on a near-optimal path.

    ``from_entry`` (forward hops from the entry vertex) can be passed in to
    share one BFS across queries.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    if from_entry is None:
        from_entry = bfs_hops(graph, graph.entry_vertex, "forward")
    if from_entry[v_star] < 0:
        raise UnreachableTarget(f"query {query_id}: v*={v_star} unreachable from entry")
    to_target = bfs_hops(graph, v_star, "backward")
    sel = select_vertices(from_entry, to_target, v_star, m)
    return HopCacheEntry(query_id, int(v_star), sel, to_target[sel])


def ref_set(entry: HopCacheEntry, heap) -> np.ndarray:
    """Heap members with the fewest cached hops to v*; empty if none cached."""
    heap = np.asarray(heap, dtype=np.int64)
    if heap.size == 0:
        raise ValueError("empty heap")
    lookup = entry.hops_to_target()
    d = np.array([lookup.get(int(v), -1) for v in heap])
    cached = d >= 0
    if not cached.any():
        return np.zeros(0, dtype=np.int64)
    best = d[cached].min()
    return heap[d == best]


def precompute_cache(graph: SimilarityGraph, v_stars, m: int = DEFAULT_SLACK,
                     workers: int = 1, query_ids=None) -> HopCache:
    """One entry per training query whose v* is reachable from the entry.

    Content does not depend on ``workers``; unreachable queries are listed
    in ``HopCache.excluded``.
    """
    v_stars = np.asarray(v_stars, dtype=np.int64)
    if query_ids is None:
        query_ids = np.arange(len(v_stars))
    from_entry = bfs_hops(graph, graph.entry_vertex, "forward")

    def one(i):
        qid, vs = int(query_ids[i]), int(v_stars[i])
        try:
            return qid, precompute_entry(graph, qid, vs, m, from_entry)
        except UnreachableTarget:
            return qid, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(v_stars))))
    else:
        results = [one(i) for i in range(len(v_stars))]
    results.sort(key=lambda r: r[0])
    entries = {qid: e for qid, e in results if e is not None}
    excluded = [qid for qid, e in results if e is None]
    if excluded:
        log.warning("%d queries excluded: nearest neighbor unreachable from entry", len(excluded))
    return HopCache(m=m, entries=entries, excluded=excluded)


# ---------------------------------------------------------------------------
# persistence


def save_cache(cache: HopCache, path) -> None:
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, len(cache.entries), cache.m))
        for qid in sorted(cache.entries):
            e = cache.entries[qid]
            f.write(struct.pack("<III", e.query_id, e.v_star, len(e.vertices)))
            pairs = np.empty((len(e.vertices), 2), dtype="<i4")
            pairs[:, 0] = e.vertices
            pairs[:, 1] = e.hops
            f.write(pairs.tobytes())


def load_cache(path) -> HopCache:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a hop cache file")
    version, count, m = struct.unpack_from("<III", raw, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    pos = 16
    entries = {}
    for _ in range(count):
        if pos + 12 > len(raw):
            raise FormatError(f"{path}: truncated")
        qid, vs, n = struct.unpack_from("<III", raw, pos)
        pos += 12
        if pos + 8 * n > len(raw):
            raise FormatError(f"{path}: truncated")
        pairs = np.frombuffer(raw, dtype="<i4", count=2 * n, offset=pos).reshape(n, 2)
        pos += 8 * n
        entries[qid] = HopCacheEntry(qid, vs, pairs[:, 0].copy(), pairs[:, 1].copy())
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return HopCache(m=m, entries=entries)
