import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphroute.data import FormatError
from graphroute.graph import SimilarityGraph, bfs_hops
from graphroute.oracle import (DEFAULT_SLACK, HopCache, HopCacheEntry, UnreachableTarget, load_cache,
                               precompute_cache, precompute_entry, ref_set, save_cache)

from conftest import edge_list, floyd_warshall, path_graph, random_graph


def test_default_slack():
    assert DEFAULT_SLACK == 5


def test_target_is_entry():
    g = path_graph(4)
    e = precompute_entry(g, 0, 0, m=0)
    assert e.hops_to_target() == {0: 0}


def test_path_graph_hand_case():
    g = path_graph(4)
    e = precompute_entry(g, 0, 3, m=0)
    assert e.hops_to_target() == {0: 3, 1: 2, 2: 1, 3: 0}


def test_ref_set_hand_cases():
    e = precompute_entry(path_graph(4), 0, 3, m=0)
    assert ref_set(e, [0, 1]).tolist() == [1]
    assert ref_set(e, [2, 3, 0]).tolist() == [3]


def test_ref_set_uncached_heap_is_empty():
    e = HopCacheEntry(0, 3, np.array([2, 3]), np.array([1, 0]))
    assert ref_set(e, [0, 1]).size == 0
    with pytest.raises(ValueError):
        ref_set(e, [])


def test_unreachable_target():
    g = SimilarityGraph.from_lists([[1], [], []], 1)
    with pytest.raises(UnreachableTarget):
        precompute_entry(g, 0, 2)


def test_cache_excludes_unreachable_queries():
    g = SimilarityGraph.from_lists([[1], [0], []], 1)
    cache = precompute_cache(g, [1, 2, 0])
    assert sorted(cache.entries) == [0, 2]
    assert cache.excluded == [1]


@pytest.mark.parametrize("seed", range(50))
def test_hops_match_floyd_warshall(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    g = random_graph(rng, n, min(1.0, 3.0 / n), max_degree=8)
    D = floyd_warshall(n, edge_list(g))
    reach = np.flatnonzero(np.isfinite(D[0]))
    m = int(rng.integers(0, 6))
    for v_star in rng.choice(reach, size=min(5, reach.size), replace=False):
        e = precompute_entry(g, 0, int(v_star), m)
        assert e.hops_to_target().get(int(v_star)) == 0
        for v, h in e.hops_to_target().items():
            assert h == D[v, v_star]
            assert D[0, v] + h <= D[0, v_star] + m
        # nothing that satisfies the slack bound is missing
        ok = np.isfinite(D[0]) & np.isfinite(D[:, v_star]) & (D[0] + D[:, v_star] <= D[0, v_star] + m)
        assert set(np.flatnonzero(ok).tolist()) == set(e.vertices.tolist())


def _walk_vertices(adj, source, target, max_len):
    """Every vertex lying on some walk source -> target with at most ``max_len`` edges."""
    on_path = set()
    stack = [(source, (source,))]
    while stack:
        v, walk = stack.pop()
        if v == target:
            on_path.update(walk)
        if len(walk) - 1 == max_len:
            continue
        for u in adj[v]:
            stack.append((u, walk + (u,)))
    return on_path


@pytest.mark.parametrize("seed", range(40))
def test_selection_contains_every_near_optimal_path(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 31))
    g = random_graph(rng, n, min(1.0, 2.0 / n), max_degree=3)
    ds_ = bfs_hops(g, 0)
    reach = np.flatnonzero(ds_ >= 0)
    v_star = int(rng.choice(reach))
    m = int(rng.integers(0, 4))
    e = precompute_entry(g, 0, v_star, m)
    expected = _walk_vertices(g.adjacency(), 0, v_star, int(ds_[v_star]) + m)
    assert expected <= set(e.vertices.tolist())
    # and every cached vertex is on such a walk (the bound is tight for walks)
    assert set(e.vertices.tolist()) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 39), min_size=1, max_size=12))
def test_ref_set_properties(seed, heap):
    g = random_graph(np.random.default_rng(seed), 40, 0.1)
    ds_ = bfs_hops(g, 0)
    reach = np.flatnonzero(ds_ >= 0)
    v_star = int(reach[seed % reach.size])
    e = precompute_entry(g, 0, v_star, 2)
    r = ref_set(e, heap)
    assert set(r.tolist()) <= set(heap)
    lookup = e.hops_to_target()
    assert len({lookup[int(v)] for v in r}) <= 1
    if v_star in heap:
        assert set(r.tolist()) == {v_star}


def test_cache_independent_of_workers(small_synth):
    ds, g = small_synth
    rng = np.random.default_rng(0)
    targets = rng.integers(0, g.num_vertices, size=100)
    one = precompute_cache(g, targets, workers=1)
    four = precompute_cache(g, targets, workers=4)
    assert len(one) == 100
    assert sorted(one.entries) == sorted(four.entries)
    for q in one.entries:
        assert one[q] == four[q]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_cache_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 60, 0.08)
    targets = rng.integers(0, 60, size=10)
    cache = precompute_cache(g, targets, m=3)
    p = tmp_path_factory.mktemp("c") / "c.hop"
    save_cache(cache, p)
    back = load_cache(p)
    assert back.m == 3
    assert sorted(back.entries) == sorted(cache.entries)
    for q in cache.entries:
        assert back[q] == cache[q]


def test_empty_cache_is_header_only(tmp_path):
    p = tmp_path / "c.hop"
    save_cache(HopCache(m=5, entries={}), p)
    assert len(p.read_bytes()) == 16
    assert len(load_cache(p)) == 0


def test_corrupted_cache_header(tmp_path):
    p = tmp_path / "c.hop"
    save_cache(precompute_cache(path_graph(3), [2]), p)
    raw = bytearray(p.read_bytes())
    raw[1] = ord("X")
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_cache(p)
    p.write_bytes(bytes(raw[:10]))
    with pytest.raises(FormatError):
        load_cache(p)
