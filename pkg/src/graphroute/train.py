"""Training objectives and loop for the learned routing scorer.

Per batch the vertex representations are recomputed once for the whole
graph, trajectories are collected (from the current stochastic policy, or
from the hop oracle for teacher forcing), and the loss gradients with
respect to the per-query score vectors are pushed back through both
branches of the model.
"""

from __future__ import annotations

import csv
import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .graph import SimilarityGraph, symmetrize
from .model import (AdamState, NonFiniteError, RoutingModel, adam_step, backward,
                    normalized_adjacency, one_cycle_lr)
from .oracle import HopCache, HopCacheEntry
from .search import (Scorer, SearchConfig, SearchTrajectory, oracle_search,
                     sample_without_replacement, search_query, stochastic_search)

log = logging.getLogger(__name__)


class Objective(str, enum.Enum):
    IMITATION = "imitation"
    TEACHER_FORCING = "teacher_forcing"
    TOPK_ONLY = "topk_only"


@dataclass
class TrainConfig:
    objective: Objective = Objective.IMITATION
    dcs_budget: int = 128
    k: int = 8
    batch_size: int = 32
    total_steps: int = 2000
    max_lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        self.objective = Objective(self.objective)
        SearchConfig(self.dcs_budget, self.k)  # validates budget / k


@dataclass
class LossBreakdown:
    routing_term: float = 0.0
    topk_term: float = 0.0
    routing_steps: int = 0
    skipped_steps: int = 0
    topk_count: int = 0
    topk_missing: int = 0
    excluded_queries: int = 0
    total: float = 0.0


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# objectives


def routing_loss(traj: SearchTrajectory, entry: HopCacheEntry, scores: np.ndarray):
    """Sum over steps of ``-log P(expanded in Ref(H) | H)``.

    ``scores`` is the dense routing score vector for this query. Returns
    ``(loss, grad, counted_steps, skipped_steps)`` where ``grad`` is dense
    like ``scores``. Steps whose heap holds no cached vertex are skipped.
    """
    n_steps = traj.num_steps
    if n_steps == 0:
        return 0.0, np.zeros_like(scores), 0, 0
    # all heap snapshots at once: one segment per step
    ptr = np.asarray(traj.heap_ptr[:n_steps + 1])
    H = np.asarray(traj.heap_ids[:ptr[-1]], dtype=np.int64)
    starts, lens = ptr[:-1], np.diff(ptr)
    seg = np.repeat(np.arange(n_steps), lens)
    dH = entry.dense(scores.size)[H]
    big = np.iinfo(np.int32).max
    best = np.minimum.reduceat(np.where(dH >= 0, dH, big), starts)
    has_ref = best < big
    in_ref = (dH == best[seg]) & has_ref[seg]
    # steps where every heap member is in Ref contribute exactly zero
    active = has_ref & (np.add.reduceat(in_ref, starts) < lens)
    counted, skipped = int(has_ref.sum()), int(n_steps - has_ref.sum())
    if not active.any():
        return 0.0, np.zeros_like(scores), counted, skipped

    s = scores[H]
    m = np.maximum.reduceat(s, starts)
    e = np.exp(s - m[seg])
    z = np.add.reduceat(e, starts)
    s_ref = np.where(in_ref, s, -np.inf)
    m_ref = np.maximum.reduceat(s_ref, starts)
    m_ref_safe = np.where(has_ref, m_ref, 0.0)
    e_ref = np.where(in_ref, np.exp(np.where(in_ref, s - m_ref_safe[seg], 0.0)), 0.0)
    z_ref = np.add.reduceat(e_ref, starts)
    per_step = (m + np.log(z)) - (m_ref_safe + np.log(np.where(has_ref, z_ref, 1.0)))
    loss = float(per_step[active].sum())
    on = active[seg]
    contrib = np.where(on, e / z[seg] - e_ref / np.where(has_ref, z_ref, 1.0)[seg], 0.0)
    grad = np.bincount(H, weights=contrib, minlength=scores.size).astype(scores.dtype, copy=False)
    return loss, grad, counted, skipped


def topk_loss(visited: np.ndarray, v_star: int, k: int, scores: np.ndarray,
              rng: np.random.Generator):
    """``-log P(v* | V minus k-1 sampled vertices)``, one Monte-Carlo draw.

    Returns ``(loss, grad)`` or ``None`` when v* was never visited.
    """
    visited = np.asarray(visited)
    hit = np.flatnonzero(visited == v_star)
    if hit.size == 0:
        return None
    others = np.delete(visited, hit[0])
    n_draw = max(k, 1) - 1
    if n_draw >= others.size:
        return 0.0, np.zeros_like(scores)
    picked = sample_without_replacement(scores[others], n_draw, rng)
    keep = np.ones(others.size, dtype=bool)
    keep[picked] = False
    pool = np.concatenate([[v_star], others[keep]])
    s = scores[pool]
    loss = _logsumexp(s) - s[0]
    grad = np.zeros_like(scores)
    grad[pool] = _softmax(s)
    grad[v_star] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# trajectory collection


def _search_config(config: TrainConfig) -> SearchConfig:
    return SearchConfig(config.dcs_budget, config.k)


def collect_imitation_batch(graph: SimilarityGraph, reps: np.ndarray, gq: np.ndarray,
                            input_dim: int, config: TrainConfig,
                            rng: np.random.Generator) -> list[SearchTrajectory]:
    """Stochastic searches under the current representations (one per row of ``gq``)."""
    scorer = Scorer.learned(reps, None, input_dim)
    scfg = _search_config(config)
    return [stochastic_search(graph, scorer, q, scfg, rng) for q in gq]


def collect_teacher_batch(graph: SimilarityGraph, reps: np.ndarray, gq: np.ndarray,
                          input_dim: int, entries: list[HopCacheEntry], config: TrainConfig,
                          rng: np.random.Generator) -> list[SearchTrajectory]:
    """Oracle-driven searches; the expansion order ignores the model scores."""
    scorer = Scorer.learned(reps, None, input_dim)
    scfg = _search_config(config)
    n = graph.num_vertices
    return [oracle_search(graph, scorer, q, scfg, e.dense(n), e.v_star, rng)
            for q, e in zip(gq, entries)]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainContext:
    base: np.ndarray
    graph: SimilarityGraph
    cache: HopCache
    train_queries: np.ndarray
    A_hat: object = None
    query_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.train_queries = np.asarray(self.train_queries, dtype=np.float64)
        if self.A_hat is None:
            self.A_hat = normalized_adjacency(symmetrize(self.graph))
        if self.query_ids is None:
            self.query_ids = np.array(sorted(self.cache.entries), dtype=np.int64)


def batch_loss(model: RoutingModel, ctx: TrainContext, batch_ids: np.ndarray, config: TrainConfig,
               rng: np.random.Generator, trajectories=None, topk_rng=None):
    """Loss and parameter gradients for one batch.

    ``trajectories`` (and ``topk_rng``) may be given to freeze every random
    choice, which is what the end-to-end gradient check relies on.
    Returns ``(LossBreakdown, grads, trajectories)``.
    """
    reps, tape = model.forward_f(ctx.A_hat, ctx.base, keep=True)
    Q = ctx.train_queries[batch_ids]
    G = model.g(Q)
    entries = [ctx.cache[int(i)] for i in batch_ids]
    if trajectories is None:
        if config.objective is Objective.TEACHER_FORCING:
            trajectories = collect_teacher_batch(ctx.graph, reps, G, ctx.base.shape[1], entries, config, rng)
        else:
            trajectories = collect_imitation_batch(ctx.graph, reps, G, ctx.base.shape[1], config, rng)
    topk_rng = rng if topk_rng is None else topk_rng
    S = G @ reps.T
    dS = np.zeros_like(S)
    lb = LossBreakdown()
    routing_sum = topk_sum = 0.0
    for b, (traj, entry) in enumerate(zip(trajectories, entries)):
        if config.objective is not Objective.TOPK_ONLY:
            loss, grad, counted, skipped = routing_loss(traj, entry, S[b])
            routing_sum += loss
            dS[b] += grad
            lb.routing_steps += counted
            lb.skipped_steps += skipped
        res = topk_loss(traj.visited, entry.v_star, config.k, S[b], topk_rng)
        if res is None:
            lb.topk_missing += 1
        else:
            topk_sum += res[0]
            dS[b] += res[1]
            lb.topk_count += 1
    B = len(batch_ids)
    lb.total = (routing_sum + topk_sum) / B
    lb.routing_term = routing_sum / max(lb.routing_steps, 1)
    lb.topk_term = topk_sum / max(lb.topk_count, 1)
    if not np.isfinite(lb.total):
        raise NonFiniteError(f"non-finite loss {lb.total}")
    dS /= B
    grads = backward(model, ctx.A_hat, tape, dS.T @ G, Q, dS @ reps)
    return lb, grads, trajectories


def train_step(model: RoutingModel, opt: AdamState, ctx: TrainContext, config: TrainConfig,
               step: int, rng: np.random.Generator) -> LossBreakdown:
    batch = rng.choice(ctx.query_ids, size=min(config.batch_size, ctx.query_ids.size), replace=False)
    lb, grads, _ = batch_loss(model, ctx, batch, config, rng)
    adam_step(model.params, grads, opt, one_cycle_lr(step, config.total_steps, config.max_lr))
    lb.excluded_queries = len(ctx.cache.excluded)
    return lb


def evaluate_recall(model: RoutingModel, ctx: TrainContext, queries: np.ndarray, nearest: np.ndarray,
                    dcs_budget: int, k: int) -> float:
    """Recall@1 of deterministic learned routing followed by exact rerank."""
    reps = model.forward_f(ctx.A_hat, ctx.base)
    scorer = Scorer.learned(reps, model.g, ctx.base.shape[1])
    cfg = SearchConfig(dcs_budget, k, mode="learned")
    hits = sum(int(search_query(ctx.graph, scorer, ctx.base, q, cfg).ids[0] == t)
               for q, t in zip(queries, nearest))
    return hits / max(len(queries), 1)


METRIC_COLUMNS = ["step", "lr", "routing_term", "topk_term", "recall@1", "dcs_budget"]


@dataclass
class TrainResult:
    model: RoutingModel
    best_step: int
    best_recall: float
    metrics: list[dict]


def train_loop(model: RoutingModel, ctx: TrainContext, config: TrainConfig,
               val_queries: np.ndarray, val_nearest: np.ndarray,
               metrics_path=None) -> TrainResult:
    """Run ``total_steps`` optimizer steps, evaluating every ``eval_every``.

    The returned model is the best checkpoint by validation Recall@1
    (earliest on ties; the untrained model counts as step 0).
    """
    rng = np.random.default_rng(config.seed)
    opt = AdamState()
    metrics = []
    best = (evaluate_recall(model, ctx, val_queries, val_nearest, config.dcs_budget, config.k),
            0, model.copy())
    metrics.append({"step": 0, "lr": one_cycle_lr(0, config.total_steps, config.max_lr),
                    "routing_term": float("nan"), "topk_term": float("nan"),
                    "recall@1": best[0], "dcs_budget": config.dcs_budget})
    acc_r, acc_t, n_acc = 0.0, 0.0, 0
    t0 = time.perf_counter()
    for step in range(config.total_steps):
        lb = train_step(model, opt, ctx, config, step, rng)
        acc_r += lb.routing_term
        acc_t += lb.topk_term
        n_acc += 1
        done = step + 1
        if done % config.eval_every == 0 or done == config.total_steps:
            rec = evaluate_recall(model, ctx, val_queries, val_nearest, config.dcs_budget, config.k)
            row = {"step": done, "lr": one_cycle_lr(step, config.total_steps, config.max_lr),
                   "routing_term": acc_r / n_acc, "topk_term": acc_t / n_acc,
                   "recall@1": rec, "dcs_budget": config.dcs_budget}
            metrics.append(row)
            log.info("step %d  routing %.4f  topk %.4f  val R@1 %.4f  (%.1fs)", done,
                     row["routing_term"], row["topk_term"], rec, time.perf_counter() - t0)
            acc_r, acc_t, n_acc = 0.0, 0.0, 0
            if rec > best[0]:
                best = (rec, done, model.copy())
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return TrainResult(model=best[2], best_step=best[1], best_recall=best[0], metrics=metrics)


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in METRIC_COLUMNS})
