"""A 2-D instance where greedy routing on raw coordinates gets stuck.

Points get a constant third coordinate so that an inner product with
``(q, 1)`` can carry a per-vertex offset; without it a dot-product scorer
over 2-D points could not even express Euclidean nearest-neighbor order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import exact_knn
from .graph import SimilarityGraph, build_nsw
from .model import ModelConfig, init_model
from .oracle import precompute_cache
from .search import greedy_route
from .train import TrainConfig, TrainContext, train_loop

TOY_POINTS = 33
TOY_DEGREE = 4
MAX_ATTEMPTS = 20


@dataclass
class ToyDemo:
    seed: int
    points: np.ndarray  # 2-D
    graph: SimilarityGraph
    representations: np.ndarray
    probe: np.ndarray
    v_star: int
    original_route: list[int]
    learned_route: list[int]


def lift(P: np.ndarray) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    return np.hstack([P, np.ones((P.shape[0], 1))])


def original_route(graph, points, q):
    return greedy_route(graph, lambda ids: -np.sqrt(((points[ids] - q) ** 2).sum(axis=1)))


def learned_route(graph, reps, q):
    qq = lift(q)[0]
    return greedy_route(graph, lambda ids: reps[ids] @ qq)


def train_toy(points: np.ndarray, graph: SimilarityGraph, seed: int, n_queries: int = 2000,
              steps: int = 400) -> np.ndarray:
    """Two-layer perceptron f (hidden 128) trained by imitation; returns f for every point."""
    rng = np.random.default_rng(seed)
    Q = rng.random((n_queries, 2))
    nearest = exact_knn(points, Q, 1).nearest
    cache = precompute_cache(graph, nearest)
    X, XQ = lift(points), lift(Q)
    ctx = TrainContext(X, graph, cache, XQ)
    model = init_model(ModelConfig(3, 3, conv_blocks=0, ffn_hidden=128), seed)
    cfg = TrainConfig(dcs_budget=12, k=1, batch_size=64, total_steps=steps, max_lr=1e-2,
                      seed=seed, eval_every=100)
    n_val = n_queries // 10
    res = train_loop(model, ctx, cfg, XQ[:n_val], nearest[:n_val])
    return res.model.forward_f(ctx.A_hat, X)


def try_seed(seed: int, n_probes: int = 500) -> ToyDemo | None:
    rng = np.random.default_rng(seed)
    P = rng.random((TOY_POINTS, 2))
    g = build_nsw(P, TOY_DEGREE, 32)
    reps = train_toy(P, g, seed)
    probes = np.random.default_rng(seed + 7919).random((n_probes, 2))
    best = None
    for q in probes:
        vs = int(np.argmin(((P - q) ** 2).sum(axis=1)))
        po = original_route(g, P, q)
        if po[-1] == vs:
            continue
        pl = learned_route(g, reps, q)
        if pl[-1] == vs and (best is None or len(pl) < len(best.learned_route)):
            best = ToyDemo(seed, P, g, reps, q, vs, po, pl)
    return best


def find_escape(seed: int = 0, attempts: int = MAX_ATTEMPTS) -> ToyDemo:
    """First seed (from ``seed`` on) whose trained toy routes around a local minimum."""
    for s in range(seed, seed + attempts):
        demo = try_seed(s)
        if demo is not None:
            return demo
    raise RuntimeError(f"no local-minimum escape found in {attempts} toy instances")


def describe(demo: ToyDemo) -> str:
    P, q = demo.points, demo.probe

    def fmt(path):
        return " -> ".join(str(v) for v in path)

    def dist(v):
        return float(np.sqrt(((P[v] - q) ** 2).sum()))

    lines = [
        f"toy instance seed {demo.seed}: {len(P)} points, out-degree <= {demo.graph.max_degree}",
        f"probe query ({q[0]:.4f}, {q[1]:.4f}); nearest point {demo.v_star} at distance {dist(demo.v_star):.4f}",
        f"original greedy: {fmt(demo.original_route)}  (stops at {demo.original_route[-1]}, "
        f"distance {dist(demo.original_route[-1]):.4f}: local minimum)",
        f"learned greedy:  {fmt(demo.learned_route)}  (reaches {demo.learned_route[-1]})",
    ]
    return "\n".join(lines)
