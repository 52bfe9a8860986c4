import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphroute import kernels
from graphroute.data import FormatError, generate_synthetic
from graphroute.graph import (UNREACHABLE, SimilarityGraph, bfs_hops, build_nsw, is_connected_from_entry,
                              load_graph, neighbors, save_graph, symmetrize)

from conftest import edge_list, floyd_warshall, path_graph, random_graph


def test_single_vertex_graph():
    g = build_nsw(np.zeros((1, 3)), 4)
    assert g.num_vertices == 1
    assert g.entry_vertex == 0
    assert neighbors(g, 0).tolist() == []


def test_empty_base_rejected():
    with pytest.raises(ValueError):
        build_nsw(np.zeros((0, 3)))


def test_line_of_ten_points():
    g = build_nsw(np.arange(10, dtype=np.float64)[:, None], 2, 10)
    for v in range(1, 9):
        assert sorted(neighbors(g, v).tolist()) == [v - 1, v + 1]
    # endpoints have a single coordinate neighbor; nearest-first fill adds the next one
    assert neighbors(g, 0).tolist() == [1, 2]
    assert neighbors(g, 9).tolist() == [8, 7]


def test_neighbors_out_of_range():
    g = build_nsw(np.zeros((2, 1)) + np.array([[0.0], [1.0]]), 2)
    with pytest.raises(IndexError):
        neighbors(g, 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 120), st.integers(1, 6), st.integers(1, 8))
def test_structural_invariants(seed, n, d, max_m):
    X = np.random.default_rng(seed).standard_normal((n, d))
    g = build_nsw(X, max_m, 20)
    g.validate()
    assert np.all(g.degrees() <= max_m)


@pytest.mark.parametrize("spec", [(10000, 32, 64, 7), (5000, 32, 32, 0), (5000, 32, 32, 1),
                                  (5000, 32, 32, 2), (1500, 16, 8, 3)])
def test_test_datasets_connected_from_entry(spec):
    ds = generate_synthetic(*spec)
    assert is_connected_from_entry(build_nsw(ds.base, 16, 200 if spec[0] > 2000 else 100))


def test_build_deterministic():
    X = np.random.default_rng(0).standard_normal((300, 8))
    assert build_nsw(X, 8, 50) == build_nsw(X, 8, 50)


def test_backends_build_identical_graphs():
    X = np.random.default_rng(1).standard_normal((400, 6))
    a = kernels.build_nsw(X, 8, 40)
    b = kernels.python_backend.build_nsw(X, 8, 40)
    assert np.array_equal(a[1], b[1])
    for v in range(len(a[1])):
        assert np.array_equal(a[0][v, :a[1][v]], b[0][v, :b[1][v]])


def test_backends_bfs_identical(rng):
    g = random_graph(rng, 80, 0.04)
    for s in (0, 5, 40):
        assert np.array_equal(kernels.bfs(g.indptr, g.indices, s),
                              kernels.python_backend.bfs(g.indptr, g.indices, s))


# -- symmetrize -------------------------------------------------------------

def test_symmetrize_single_edge():
    g = SimilarityGraph.from_lists([[1], []], 1)
    und = symmetrize(g)
    assert und[0].tolist() == [1]
    assert und[1].tolist() == [0]


def test_symmetrize_idempotent_on_symmetric_graph():
    adj = [[1, 2], [0], [0]]
    und = symmetrize(SimilarityGraph.from_lists(adj, 2))
    assert [a.tolist() for a in und] == [[1, 2], [0], [0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_symmetrize_properties(seed, n):
    g = random_graph(np.random.default_rng(seed), n, 0.2)
    und = symmetrize(g)
    edges = set(edge_list(g))
    und_edges = {(u, int(v)) for u in range(n) for v in und[u]}
    assert und_edges == edges | {(v, u) for u, v in edges}
    assert len(und_edges) // 2 <= len(edges)
    assert all(np.all(np.diff(a) > 0) for a in und)


# -- BFS ----------------------------------------------------------------------

def test_path_graph_backward_bfs():
    g = path_graph(3)
    assert bfs_hops(g, 2, "backward").tolist() == [2, 1, 0]
    assert bfs_hops(g, 2, "forward").tolist() == [UNREACHABLE, UNREACHABLE, 0]


def test_bfs_bad_direction():
    with pytest.raises(ValueError):
        bfs_hops(path_graph(2), 0, "sideways")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.floats(0.0, 0.08))
def test_bfs_matches_floyd_warshall(seed, n, p):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p)
    D = floyd_warshall(n, edge_list(g))
    s = int(rng.integers(n))
    fwd = bfs_hops(g, s, "forward")
    bwd = bfs_hops(g, s, "backward")
    expect_f = np.where(np.isinf(D[s]), UNREACHABLE, D[s])
    expect_b = np.where(np.isinf(D[:, s]), UNREACHABLE, D[:, s])
    assert np.array_equal(fwd, expect_f)
    assert np.array_equal(bwd, expect_b)
    assert fwd[s] == 0


def test_bfs_edge_relaxation_and_triangle(small_synth):
    _, g = small_synth
    ds_ = bfs_hops(g, g.entry_vertex)
    for u, v in edge_list(g)[:5000]:
        assert ds_[v] <= ds_[u] + 1
    target = 777
    dt = bfs_hops(g, target, "backward")
    ok = (ds_ >= 0) & (dt >= 0)
    assert np.all(ds_[ok] + dt[ok] >= ds_[target])


# -- persistence ----------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_graph_round_trip(tmp_path_factory, seed, n):
    g = random_graph(np.random.default_rng(seed), n, 0.1)
    p = tmp_path_factory.mktemp("g") / "g.nsw"
    save_graph(g, p)
    back = load_graph(p)
    assert back == g
    for v in range(n):
        assert np.array_equal(back.neighbors(v), g.neighbors(v))


def test_single_vertex_file_layout(tmp_path):
    p = tmp_path / "one.nsw"
    save_graph(build_nsw(np.zeros((1, 2)), 3), p)
    raw = p.read_bytes()
    assert len(raw) == 4 + 16 + 4
    assert raw[-4:] == b"\x00\x00\x00\x00"


def test_corrupted_magic(tmp_path):
    p = tmp_path / "g.nsw"
    save_graph(path_graph(3), p)
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_graph(p)


def test_truncated_graph_file(tmp_path):
    p = tmp_path / "g.nsw"
    save_graph(path_graph(5), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_graph(p)


def test_wrong_version(tmp_path):
    p = tmp_path / "g.nsw"
    save_graph(path_graph(2), p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_graph(p)
