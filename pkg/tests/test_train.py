import itertools
import math

import numpy as np
import pytest

from graphroute.data import exact_knn, generate_synthetic
from graphroute.graph import build_nsw
from graphroute.model import ModelConfig, init_model
from graphroute.oracle import HopCacheEntry, precompute_cache
from graphroute.search import SearchTrajectory
from graphroute.train import (LossBreakdown, Objective, TrainConfig, TrainContext, batch_loss,
                              collect_imitation_batch, collect_teacher_batch, routing_loss, topk_loss,
                              train_loop, write_metrics, METRIC_COLUMNS)


def _traj(expanded, heaps, visited=None):
    ptr = np.cumsum([0] + [len(h) for h in heaps])
    ids = np.concatenate([np.asarray(h, dtype=np.int32) for h in heaps]) if heaps else np.zeros(0, np.int32)
    visited = np.unique(np.concatenate(heaps)) if visited is None else np.asarray(visited)
    return SearchTrajectory(visited=visited, scores=np.zeros(len(visited)), expanded=np.asarray(expanded),
                            visited_after=np.arange(1, len(expanded) + 1), heap_ptr=ptr, heap_ids=ids,
                            n_scored=len(visited), dcs_used=float(len(visited)))


def _entry(v_star, hops: dict):
    vs = sorted(hops)
    return HopCacheEntry(0, v_star, np.array(vs), np.array([hops[v] for v in vs]))


# -- routing loss -------------------------------------------------------------

def test_routing_loss_three_step_hand_case():
    s = np.array([0.3, -1.0, 2.0, 0.5, 1.5, -0.2])
    entry = _entry(5, {0: 3, 1: 2, 2: 2, 3: 1, 4: 1, 5: 0})
    traj = _traj([0, 2, 4], [[0], [1, 2], [1, 3, 4]])
    loss, _, counted, skipped = routing_loss(traj, entry, s)

    def term(H, R):
        return -math.log(sum(math.exp(s[v]) for v in R) / sum(math.exp(s[v]) for v in H))

    expected = term([0], [0]) + term([1, 2], [1, 2]) + term([1, 3, 4], [3, 4])
    assert abs(loss - expected) < 1e-9
    assert (counted, skipped) == (3, 0)


def test_routing_loss_two_equal_scores_is_ln2():
    entry = _entry(1, {0: 1, 1: 0})
    loss, _, _, _ = routing_loss(_traj([1], [[0, 1]]), entry, np.zeros(2))
    assert abs(loss - math.log(2)) < 1e-9


def test_routing_loss_full_ref_is_zero():
    entry = _entry(3, {0: 1, 1: 1, 3: 0})
    loss, grad, _, _ = routing_loss(_traj([0], [[0, 1]]), entry, np.array([1.0, 2.0, 0.0, 0.0]))
    assert loss == 0.0 and np.all(grad == 0)


def test_routing_loss_skips_uncached_heaps():
    entry = _entry(3, {2: 1, 3: 0})
    traj = _traj([0, 1, 2], [[0], [1, 4], [2, 4]])
    loss, _, counted, skipped = routing_loss(traj, entry, np.arange(5.0))
    assert (counted, skipped) == (1, 2)
    assert counted + skipped == traj.num_steps


def test_routing_loss_score_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(8)
    entry = _entry(7, {0: 3, 1: 2, 2: 2, 3: 2, 5: 1, 6: 1, 7: 0})
    traj = _traj([0, 1, 5, 6], [[0], [1, 2, 3, 4], [2, 3, 4, 5, 6], [2, 3, 4, 6, 7]])
    _, grad, _, _ = routing_loss(traj, entry, s)
    h = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = h
        num = (routing_loss(traj, entry, s + e)[0] - routing_loss(traj, entry, s - e)[0]) / (2 * h)
        assert abs(num - grad[i]) <= 1e-6 * max(abs(num), abs(grad[i]), 1e-3)


# -- top-k loss -----------------------------------------------------------------

def test_topk_k_equals_V_is_zero():
    loss, grad = topk_loss(np.array([4, 1, 2]), 1, 3, np.arange(5.0), np.random.default_rng(0))
    assert loss == 0.0 and np.all(grad == 0)


def test_topk_missing_target_is_none():
    assert topk_loss(np.array([0, 1]), 3, 2, np.zeros(4), np.random.default_rng(0)) is None


def test_topk_two_equal_scores_k1_is_ln2():
    loss, _ = topk_loss(np.array([0, 1]), 1, 1, np.zeros(2), np.random.default_rng(0))
    assert abs(loss - math.log(2)) < 1e-12


def test_topk_expectation_matches_enumeration():
    s = np.array([0.4, -0.3, 1.1, 0.0])
    V, v_star, k = np.arange(4), 2, 2
    others = [0, 1, 3]
    p = np.exp(s[others]) / np.exp(s[others]).sum()
    exact = 0.0
    for j, pj in zip(others, p):
        pool = [v for v in V if v != j]
        exact += pj * -(s[v_star] - math.log(sum(math.exp(s[v]) for v in pool)))
    rng = np.random.default_rng(1)
    draws = np.array([topk_loss(V, v_star, k, s, rng)[0] for _ in range(10_000)])
    sigma = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - exact) < 3 * sigma


def test_topk_enumeration_k3_over_five():
    s = np.array([0.2, 1.0, -0.5, 0.7, 0.0])
    v_star, others = 0, [1, 2, 3, 4]
    exact = 0.0
    for a, b in itertools.permutations(others, 2):
        rest = [v for v in others if v != a]
        pa = math.exp(s[a]) / sum(math.exp(s[v]) for v in others)
        pb = math.exp(s[b]) / sum(math.exp(s[v]) for v in rest)
        pool = [v for v in range(5) if v not in (a, b)]
        exact += pa * pb * (math.log(sum(math.exp(s[v]) for v in pool)) - s[v_star])
    rng = np.random.default_rng(2)
    draws = np.array([topk_loss(np.arange(5), v_star, 3, s, rng)[0] for _ in range(10_000)])
    assert abs(draws.mean() - exact) < 3 * draws.std(ddof=1) / math.sqrt(draws.size)


# -- end to end ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_ctx():
    ds = generate_synthetic(500, 8, 4, 0)
    g = build_nsw(ds.base, 8, 50)
    gt = exact_knn(ds.base, ds.train_queries, 1)
    cache = precompute_cache(g, gt.nearest)
    return ds, TrainContext(ds.base, g, cache, ds.train_queries)


def _desk(seed):
    return init_model(ModelConfig.desk(8), seed)


def test_first_step_loss_finite(toy_ctx):
    _, ctx = toy_ctx
    cfg = TrainConfig(dcs_budget=32, k=4, batch_size=8)
    lb, grads, trajs = batch_loss(_desk(0), ctx, ctx.query_ids[:8], cfg, np.random.default_rng(0))
    assert isinstance(lb, LossBreakdown)
    assert np.isfinite(lb.total) and lb.routing_term >= 0 and lb.topk_term >= 0
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert lb.routing_steps + lb.skipped_steps == sum(t.num_steps for t in trajs)


@pytest.mark.parametrize("objective", list(Objective))
def test_end_to_end_gradient_with_frozen_samples(toy_ctx, objective):
    _, ctx = toy_ctx
    model = _desk(1)
    cfg = TrainConfig(objective=objective, dcs_budget=32, k=4, batch_size=6)
    batch = ctx.query_ids[:6]
    _, grads, trajs = batch_loss(model, ctx, batch, cfg, np.random.default_rng(3),
                                 topk_rng=np.random.default_rng(9))

    def loss():
        return batch_loss(model, ctx, batch, cfg, None, trajectories=trajs,
                          topk_rng=np.random.default_rng(9))[0].total

    rng = np.random.default_rng(4)
    h = 1e-5
    for name, p in model.params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            num, ana = (up - down) / (2 * h), grads[name].reshape(-1)[i]
            assert abs(num - ana) <= 1e-3 * max(abs(num) + abs(ana), 1e-6), name


def test_topk_only_has_no_routing_gradient(toy_ctx):
    _, ctx = toy_ctx
    model = _desk(2)
    batch = ctx.query_ids[:1]
    v_star = ctx.cache[int(batch[0])].v_star
    # a recorded trajectory that never visits v*: only routing terms could contribute
    others = [v for v in range(4) if v != v_star]
    traj = _traj([others[0]], [[others[0], others[1]]], visited=others[:2])
    cfg_t = TrainConfig(objective=Objective.TOPK_ONLY, dcs_budget=32, k=4)
    lb, grads, _ = batch_loss(model, ctx, batch, cfg_t, None, trajectories=[traj],
                              topk_rng=np.random.default_rng(0))
    assert lb.topk_missing == 1 and lb.total == 0
    assert all(np.all(g == 0) for g in grads.values())


def test_teacher_trajectories_independent_of_parameters(toy_ctx):
    _, ctx = toy_ctx
    cfg = TrainConfig(objective=Objective.TEACHER_FORCING, dcs_budget=32, k=4)
    ids = ctx.query_ids[:10]
    entries = [ctx.cache[int(i)] for i in ids]
    runs = []
    for seed in (0, 1):
        m = _desk(seed)
        reps = m.forward_f(ctx.A_hat, ctx.base)
        runs.append(collect_teacher_batch(ctx.graph, reps, m.g(ctx.train_queries[ids]), 8, entries, cfg,
                                          np.random.default_rng(5)))
    for a, b in zip(*runs):
        assert np.array_equal(a.expanded, b.expanded)
        assert np.array_equal(a.visited, b.visited)
    # the teacher stops once v* is expanded
    for t, e in zip(runs[0], entries):
        if e.v_star in t.expanded:
            assert t.expanded[-1] == e.v_star


def test_imitation_trajectories_depend_on_parameters(toy_ctx):
    _, ctx = toy_ctx
    cfg = TrainConfig(dcs_budget=32, k=4)
    ids = ctx.query_ids[:10]
    runs = []
    for seed in (0, 1):
        m = _desk(seed)
        reps = m.forward_f(ctx.A_hat, ctx.base)
        runs.append(collect_imitation_batch(ctx.graph, reps, m.g(ctx.train_queries[ids]), 8, cfg,
                                            np.random.default_rng(5)))
    assert any(not np.array_equal(a.expanded, b.expanded) for a, b in zip(*runs))


def test_training_decreases_smoothed_loss(toy_ctx):
    from graphroute.model import AdamState
    from graphroute.train import train_step
    _, ctx = toy_ctx
    model = _desk(0)
    cfg = TrainConfig(dcs_budget=32, k=4, batch_size=16, total_steps=200, max_lr=3e-3)
    rng, opt = np.random.default_rng(0), AdamState()
    losses = [train_step(model, opt, ctx, cfg, s, rng).total for s in range(200)]
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]


def test_train_loop_deterministic_and_logged(toy_ctx, tmp_path):
    ds, ctx = toy_ctx
    val = ds.test_queries[:20]
    nearest = exact_knn(ds.base, val, 1).nearest
    cfg = TrainConfig(dcs_budget=32, k=4, batch_size=8, total_steps=6, eval_every=2, seed=3)
    a = train_loop(_desk(0), ctx, cfg, val, nearest, metrics_path=tmp_path / "m.csv")
    b = train_loop(_desk(0), ctx, cfg, val, nearest)
    assert a.model.fingerprint() == b.model.fingerprint()
    assert [r["recall@1"] for r in a.metrics] == [r["recall@1"] for r in b.metrics]
    assert [r["step"] for r in a.metrics] == [0, 2, 4, 6]
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].split(",") == METRIC_COLUMNS
    assert len(lines) == 5
    assert a.best_recall == max(r["recall@1"] for r in a.metrics)


def test_write_metrics_header_only(tmp_path):
    write_metrics([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(METRIC_COLUMNS)
