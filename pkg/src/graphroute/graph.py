"""NSW similarity graph: construction, adjacency queries, BFS, persistence."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import FormatError

GRAPH_MAGIC = b"NSWG"
GRAPH_VERSION = 1
UNREACHABLE = -1


@dataclass(eq=False)
class SimilarityGraph:
    """Directed bounded-degree graph stored in CSR form.

    ``indices[indptr[v]:indptr[v+1]]`` is the ordered out-list of ``v``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    max_degree: int
    entry_vertex: int = 0
    _reverse: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        if not 0 <= self.entry_vertex < self.num_vertices:
            raise ValueError("entry vertex out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    def neighbors(self, v: int) -> np.ndarray:
        if not 0 <= v < self.num_vertices:
            raise IndexError(f"vertex {v} out of range [0, {self.num_vertices})")
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency(self) -> list[list[int]]:
        return [self.neighbors(v).tolist() for v in range(self.num_vertices)]

    def reversed_csr(self) -> tuple[np.ndarray, np.ndarray]:
        if self._reverse is None:
            n = self.num_vertices
            src = np.repeat(np.arange(n, dtype=np.int32), self.degrees())
            order = np.lexsort((src, self.indices))
            rev_indices = src[order]
            counts = np.bincount(self.indices, minlength=n)
            rev_indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(counts, out=rev_indptr[1:])
            self._reverse = (rev_indptr, np.ascontiguousarray(rev_indices, dtype=np.int32))
        return self._reverse

    def __eq__(self, other):
        if not isinstance(other, SimilarityGraph):
            return NotImplemented
        return (self.max_degree == other.max_degree
                and self.entry_vertex == other.entry_vertex
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    @classmethod
    def from_lists(cls, adjacency, max_degree: int | None = None, entry_vertex: int = 0):
        lens = [len(a) for a in adjacency]
        indptr = np.zeros(len(adjacency) + 1, dtype=np.int64)
        np.cumsum(lens, out=indptr[1:])
        flat = [int(u) for a in adjacency for u in a]
        indices = np.array(flat, dtype=np.int32)
        if max_degree is None:
            max_degree = max(lens, default=0) or 1
        return cls(indptr, indices, max_degree, entry_vertex)

    def validate(self) -> None:
        """Check the structural invariants; raises ``ValueError``."""
        for v in range(self.num_vertices):
            nb = self.neighbors(v)
            if len(nb) > self.max_degree:
                raise ValueError(f"vertex {v} has out-degree {len(nb)} > {self.max_degree}")
            if np.any(nb == v):
                raise ValueError(f"self-loop at {v}")
            if len(np.unique(nb)) != len(nb):
                raise ValueError(f"duplicate neighbor at {v}")
            if np.any((nb < 0) | (nb >= self.num_vertices)):
                raise ValueError(f"neighbor id out of range at {v}")


def build_nsw(base: np.ndarray, max_degree: int = 16, ef_construction: int = 200,
              seed: int = 0) -> SimilarityGraph:
    """Insert points in index order into a single-layer HNSW graph.

    Construction is fully deterministic; ``seed`` is accepted for interface
    stability and does not influence the result.
    """
    base = np.asarray(base)
    if base.ndim != 2 or base.shape[0] == 0:
        raise ValueError("base must be a non-empty matrix")
    if max_degree < 1:
        raise ValueError("max_degree must be >= 1")
    nbrs, deg = kernels.build_nsw(np.ascontiguousarray(base, dtype=np.float64),
                                  int(max_degree), int(ef_construction))
    indptr = np.zeros(len(deg) + 1, dtype=np.int64)
    np.cumsum(deg, out=indptr[1:])
    mask = np.arange(max_degree)[None, :] < deg[:, None]
    indices = nbrs[mask]
    return SimilarityGraph(indptr, indices, int(max_degree), 0)


def neighbors(graph: SimilarityGraph, v: int) -> np.ndarray:
    return graph.neighbors(v)


def symmetrize(graph: SimilarityGraph) -> list[np.ndarray]:
    """Undirected adjacency: sorted union of each edge and its reverse."""
    n = graph.num_vertices
    src = np.repeat(np.arange(n), graph.degrees())
    dst = graph.indices.astype(np.int64)
    a = np.concatenate([src, dst])
    b = np.concatenate([dst, src])
    keys = np.unique(a * n + b)
    a, b = keys // n, keys % n
    splits = np.searchsorted(a, np.arange(1, n))
    return [part.astype(np.int32) for part in np.split(b, splits)]


def bfs_hops(graph: SimilarityGraph, source: int, direction: str = "forward") -> np.ndarray:
    """Unweighted hop counts from ``source``; ``UNREACHABLE`` where none.

    ``direction="backward"`` walks reversed edges, giving hops *to* source.
    """
    if not 0 <= source < graph.num_vertices:
        raise IndexError("source out of range")
    if direction == "forward":
        return kernels.bfs(graph.indptr, graph.indices, int(source))
    if direction == "backward":
        rp, ri = graph.reversed_csr()
        return kernels.bfs(rp, ri, int(source))
    raise ValueError(f"unknown direction {direction!r}")


def is_connected_from_entry(graph: SimilarityGraph) -> bool:
    return bool(np.all(bfs_hops(graph, graph.entry_vertex) >= 0))


# ---------------------------------------------------------------------------
# persistence


def save_graph(graph: SimilarityGraph, path) -> None:
    n = graph.num_vertices
    with open(path, "wb") as f:
        f.write(GRAPH_MAGIC)
        f.write(struct.pack("<IIII", GRAPH_VERSION, n, graph.max_degree, graph.entry_vertex))
        body = np.empty(n + graph.num_edges, dtype="<i4")
        pos = np.arange(n) + graph.indptr[:-1]
        body[pos] = graph.degrees()
        mask = np.ones(body.size, dtype=bool)
        mask[pos] = False
        body[mask] = graph.indices
        f.write(body.tobytes())


def load_graph(path) -> SimilarityGraph:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != GRAPH_MAGIC:
        raise FormatError(f"{path}: not a graph file")
    version, n, max_degree, entry = struct.unpack_from("<IIII", raw, 4)
    if version != GRAPH_VERSION:
        raise FormatError(f"{path}: unsupported graph version {version}")
    if (len(raw) - 20) % 4:
        raise FormatError(f"{path}: truncated")
    words = np.frombuffer(raw, dtype="<i4", offset=20)
    adjacency = []
    pos = 0
    for _ in range(n):
        if pos >= words.size:
            raise FormatError(f"{path}: truncated")
        k = int(words[pos])
        if k < 0 or pos + 1 + k > words.size:
            raise FormatError(f"{path}: truncated")
        adjacency.append(words[pos + 1:pos + 1 + k])
        pos += 1 + k
    if pos != words.size:
        raise FormatError(f"{path}: trailing bytes")
    if n == 0 or entry >= n:
        raise FormatError(f"{path}: bad entry vertex")
    return SimilarityGraph.from_lists(adjacency, max_degree, entry)
