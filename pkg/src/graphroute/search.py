"""Budgeted beam search over a similarity graph.

Costs are measured in DCS units, one unit being a distance computation in
the original D-dimensional space. A routing scorer working in d dimensions
costs ``d / D`` per evaluation, the final rerank costs one unit per
candidate, and a ``d < D`` query projection costs ``d`` units up front.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .graph import SimilarityGraph


class ScorerMode(str, enum.Enum):
    ORIGINAL = "original"
    LEARNED = "learned"
    TRUNCATED = "truncated"


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class SearchConfig:
    dcs_budget: int
    k: int = 0
    tau: float = 1.0
    mode: ScorerMode = ScorerMode.ORIGINAL
    routing_dim: int | None = None
    stochastic: bool = False
    rng_seed: int = 0
    beam_cap: int = 0  # 0 = unbounded heap

    def __post_init__(self):
        self.mode = ScorerMode(self.mode)
        if self.dcs_budget <= 0:
            raise ValueError("dcs_budget must be positive")
        if not 0 <= self.k <= self.dcs_budget:
            raise ValueError("need 0 <= k <= dcs_budget")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class Scorer:
    """Routing scores for one query at a time.

    ``matrix`` holds one routing vector per vertex and ``transform`` maps a
    raw query into the same space. With ``metric == "dot"`` the score is the
    inner product, otherwise it is the negative Euclidean distance over tau.
    """

    mode: ScorerMode
    matrix: np.ndarray
    input_dim: int
    transform: Callable[[np.ndarray], np.ndarray] | None = None
    metric: str = "l2"
    tau: float = 1.0

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)

    @classmethod
    def original(cls, base: np.ndarray, tau: float = 1.0) -> "Scorer":
        return cls(ScorerMode.ORIGINAL, base, base.shape[1], None, "l2", tau)

    @classmethod
    def learned(cls, representations: np.ndarray, query_fn, input_dim: int) -> "Scorer":
        return cls(ScorerMode.LEARNED, representations, input_dim, query_fn, "dot", 1.0)

    @classmethod
    def truncated(cls, pca, truncated_base: np.ndarray, tau: float = 1.0) -> "Scorer":
        from .data import pca_transform
        return cls(ScorerMode.TRUNCATED, truncated_base, pca.in_dim,
                   lambda q: pca_transform(pca, q), "l2", tau)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def unit_cost(self) -> float:
        return self.dim / self.input_dim

    @property
    def projection_cost(self) -> int:
        return self.dim if self.dim < self.input_dim else 0

    def prepare(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return q if self.transform is None else np.asarray(self.transform(q), dtype=np.float64)

    def score_vector(self, v, q_repr) -> np.ndarray | float:
        rows = self.matrix[v]
        if self.metric == "dot":
            return rows @ q_repr
        diff = rows - q_repr
        return -np.sqrt(np.sum(diff * diff, axis=-1)) / self.tau


@dataclass
class DcsMeter:
    budget: float
    used: float = 0.0

    def charge(self, cost: float) -> None:
        if self.used + cost > self.budget + 1e-12:
            raise BudgetExceeded(f"budget {self.budget} exhausted")
        self.used += cost


def score(scorer: Scorer, v: int, q_repr: np.ndarray, meter: DcsMeter | None = None) -> float:
    """Score one vertex, charging ``unit_cost`` to ``meter`` first."""
    if meter is not None:
        meter.charge(scorer.unit_cost)
    return float(scorer.score_vector(v, q_repr))


def heap_softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty heap")
    e = np.exp(s - s.max())
    return e / e.sum()


def routing_budget(dcs_budget: int, k: int, d: int | None = None, D: int | None = None) -> float:
    """DCS left for routing scorings after rerank and projection reserves.

    Returned in units of routing scorings, so for ``d < D`` it is
    ``(D/d) * (DCS - k - d)``.
    """
    if d is None or D is None or d >= D:
        return float(dcs_budget - k)
    return (dcs_budget - k - d) * D / d


def max_scorings(config: SearchConfig, scorer: Scorer) -> int:
    spare = config.dcs_budget - config.k - scorer.projection_cost
    if spare <= 0:
        return 0
    # integer form of floor(spare * D / d) avoids rounding at exact budgets
    return int(spare * scorer.input_dim // scorer.dim)


@dataclass
class SearchTrajectory:
    visited: np.ndarray  # in scoring order; visited[0] is the entry
    scores: np.ndarray
    expanded: np.ndarray
    visited_after: np.ndarray  # |V| after each expansion
    heap_ptr: np.ndarray
    heap_ids: np.ndarray
    n_scored: int
    dcs_used: float
    result_candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def num_steps(self) -> int:
        return len(self.expanded)

    def heap(self, i: int) -> np.ndarray:
        return self.heap_ids[self.heap_ptr[i]:self.heap_ptr[i + 1]]

    @property
    def steps(self):
        return [(int(self.expanded[i]), self.heap(i)) for i in range(self.num_steps)]

    @property
    def has_heaps(self) -> bool:
        return len(self.heap_ptr) == self.num_steps + 1


def _run(graph, scorer, q, config, policy, uniforms=(), ref_dt=(), target=-1, record=True):
    q_repr = scorer.prepare(q)
    budget = max_scorings(config, scorer)
    out = kernels.search(
        graph.indptr, graph.indices, graph.entry_vertex, scorer.matrix, q_repr,
        kernels.SCORE_DOT if scorer.metric == "dot" else kernels.SCORE_NEG_L2,
        float(scorer.tau), budget, policy, np.asarray(uniforms, dtype=np.float64),
        np.asarray(ref_dt, dtype=np.int32), int(target), bool(record), int(config.beam_cap),
    )
    visited, scores, expanded, after, hptr, hids = out
    n_scored = len(visited) if budget >= 1 else 0
    traj = SearchTrajectory(
        visited=visited, scores=scores, expanded=expanded, visited_after=after,
        heap_ptr=hptr, heap_ids=hids, n_scored=n_scored,
        dcs_used=n_scored * scorer.unit_cost + (scorer.projection_cost if n_scored else 0),
    )
    traj.result_candidates = topk_by_score(visited, scores, config.k)
    return traj


def _uniforms(rng, config, scorer, graph):
    n = min(max_scorings(config, scorer), graph.num_vertices) + 1
    return rng.random(n)


def beam_search(graph: SimilarityGraph, scorer: Scorer, q: np.ndarray, config: SearchConfig,
                record: bool = False) -> SearchTrajectory:
    """Deterministic budgeted search: always expand the best-scored heap vertex."""
    return _run(graph, scorer, q, config, kernels.POLICY_BEST, record=record)


def stochastic_search(graph: SimilarityGraph, scorer: Scorer, q: np.ndarray, config: SearchConfig,
                      rng: np.random.Generator | None = None, record: bool = True) -> SearchTrajectory:
    """Like :func:`beam_search`, but the expanded vertex is drawn from the heap softmax."""
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    return _run(graph, scorer, q, config, kernels.POLICY_SOFTMAX,
                uniforms=_uniforms(rng, config, scorer, graph), record=record)


def oracle_search(graph: SimilarityGraph, scorer: Scorer, q: np.ndarray, config: SearchConfig,
                  hops_to_target: np.ndarray, target: int,
                  rng: np.random.Generator) -> SearchTrajectory:
    """Teacher-forced traversal: expand uniformly among heap vertices with
    the fewest cached hops to ``target``; stop once ``target`` is expanded.

    ``hops_to_target`` is dense with -1 for uncached vertices.
    """
    return _run(graph, scorer, q, config, kernels.POLICY_REF,
                uniforms=_uniforms(rng, config, scorer, graph),
                ref_dt=hops_to_target, target=target, record=True)


def topk_by_score(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k ids by descending score, ties to the smaller id."""
    ids = np.asarray(ids)
    order = np.lexsort((ids, -np.asarray(scores)))
    return ids[order[:k]].astype(np.int64)


def sample_without_replacement(scores: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of ``n`` draws from iterated, renormalized softmax."""
    scores = np.asarray(scores, dtype=np.float64)
    n = min(n, scores.size)
    alive = np.ones(scores.size, dtype=bool)
    picked = np.empty(n, dtype=np.int64)
    for t in range(n):
        idx = np.flatnonzero(alive)
        p = heap_softmax(scores[idx])
        j = idx[min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), idx.size - 1)]
        picked[t] = j
        alive[j] = False
    return picked


def select_topk_visited(visited: np.ndarray, scores: np.ndarray, k: int, stochastic: bool = False,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    visited = np.asarray(visited)
    if k >= visited.size:
        return topk_by_score(visited, scores, visited.size)
    if not stochastic:
        return topk_by_score(visited, scores, k)
    if rng is None:
        raise ValueError("stochastic selection needs an rng")
    return visited[sample_without_replacement(scores, k, rng)].astype(np.int64)


def rerank(candidates, q: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Order candidates by exact Euclidean distance to ``q``, ties by id."""
    c = np.asarray(candidates, dtype=np.int64)
    if c.size == 0:
        return c
    diff = np.asarray(base[c], dtype=np.float64) - np.asarray(q, dtype=np.float64)
    d2 = np.einsum("ij,ij->i", diff, diff)
    return c[np.lexsort((c, d2))]


@dataclass
class SearchResult:
    ids: np.ndarray  # final ranking
    trajectory: SearchTrajectory
    dcs_used: float
    rerank_count: int


def search_query(graph: SimilarityGraph, scorer: Scorer, base: np.ndarray, q: np.ndarray,
                 config: SearchConfig) -> SearchResult:
    """Routing plus the final answer list.

    With ``k > 0`` the top-k routing candidates are reranked on exact
    distances; with ``k = 0`` the visited set is returned in routing order.
    """
    traj = beam_search(graph, scorer, q, config)
    if config.k > 0:
        ids = rerank(traj.result_candidates, q, base)
        n_rerank = len(ids)
    else:
        ids = topk_by_score(traj.visited, traj.scores, len(traj.visited))
        n_rerank = 0
    return SearchResult(ids=ids, trajectory=traj, dcs_used=traj.dcs_used + n_rerank,
                        rerank_count=n_rerank)


def greedy_route(graph: SimilarityGraph, score_fn: Callable[[np.ndarray], np.ndarray]) -> list[int]:
    """Pure greedy walk: move to the best neighbor while it beats the current vertex.

    ``score_fn`` maps an id array to scores (higher is better).
    """
    cur = graph.entry_vertex
    cur_s = float(score_fn(np.array([cur]))[0])
    path = [cur]
    while True:
        nb = graph.neighbors(cur)
        if nb.size == 0:
            return path
        s = np.asarray(score_fn(nb), dtype=np.float64)
        j = int(np.lexsort((nb, -s))[0])
        if not s[j] > cur_s:
            return path
        cur, cur_s = int(nb[j]), float(s[j])
        path.append(cur)
        if len(path) > graph.num_vertices:
            return path
