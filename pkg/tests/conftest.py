import numpy as np
import pytest

from graphroute.graph import SimilarityGraph


def random_graph(rng, n, p=0.15, max_degree=None):
    """Random directed graph without self-loops, optionally degree-capped."""
    adj = []
    for v in range(n):
        nb = [u for u in range(n) if u != v and rng.random() < p]
        rng.shuffle(nb)
        if max_degree is not None:
            nb = nb[:max_degree]
        adj.append(nb)
    cap = max(max_degree or 0, max((len(a) for a in adj), default=0), 1)
    return SimilarityGraph.from_lists(adj, cap)


def path_graph(n):
    return SimilarityGraph.from_lists([[v + 1] if v + 1 < n else [] for v in range(n)], 1)


def floyd_warshall(n, edges):
    inf = np.inf
    D = np.full((n, n), inf)
    np.fill_diagonal(D, 0)
    for u, v in edges:
        D[u, v] = min(D[u, v], 1)
    for k in range(n):
        D = np.minimum(D, D[:, k:k + 1] + D[k:k + 1, :])
    return D


def edge_list(g):
    return [(u, int(v)) for u in range(g.num_vertices) for v in g.neighbors(u)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    from graphroute.data import generate_synthetic
    from graphroute.graph import build_nsw
    ds = generate_synthetic(1500, 16, 8, seed=3)
    return ds, build_nsw(ds.base, 16, 100)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
