"""Pure-Python reference kernels.

These mirror ``_kernels.pyx`` call for call. They are used when the compiled
extension is unavailable (or ``GRAPHROUTE_PURE_PYTHON=1``) and serve as the
reference the compiled kernels are tested against.
"""

from __future__ import annotations

import heapq
import math
from collections import deque

import numpy as np

SCORE_NEG_L2 = 0
SCORE_DOT = 1

POLICY_BEST = 0
POLICY_SOFTMAX = 1
POLICY_REF = 2

BACKEND = "python"


def _sq(X, i, q):
    diff = X[i] - q
    return float(diff @ diff)


def _select_neighbors(X, cand, dcand, max_degree):
    """Heuristic selection with nearest-first fill.

    ``cand`` is sorted by ascending distance ``dcand`` to the new point.
    """
    kept = []
    dropped = []
    for c, dc in zip(cand, dcand):
        if len(kept) >= max_degree:
            break
        good = True
        for r in kept:
            if _sq(X, c, X[r]) <= dc:
                good = False
                break
        if good:
            kept.append(c)
        else:
            dropped.append(c)
    for c in dropped:
        if len(kept) >= max_degree:
            break
        kept.append(c)
    return kept


def _search_layer(X, nbrs, deg, q, entry, ef):
    """HNSW-style ef-bounded search used during construction.

    Returns candidate ids sorted by (distance, id) with their squared
    distances.
    """
    d0 = _sq(X, entry, q)
    visited = {entry}
    cands = [(d0, entry)]
    results = [(-d0, -entry)]  # max-heap on (distance, id)
    while cands:
        dc, c = heapq.heappop(cands)
        worst = -results[0][0]
        if dc > worst and len(results) >= ef:
            break
        row = nbrs[c, :deg[c]]
        new = [int(u) for u in row if u not in visited]
        if not new:
            continue
        visited.update(new)
        diff = X[new] - q
        dists = np.einsum("ij,ij->i", diff, diff)
        for u, du in zip(new, dists):
            du = float(du)
            if len(results) < ef or (du, u) < (-results[0][0], -results[0][1]):
                heapq.heappush(cands, (du, u))
                heapq.heappush(results, (-du, -u))
                if len(results) > ef:
                    heapq.heappop(results)
    out = sorted((-nd, -ni) for nd, ni in results)
    return [i for _, i in out], [d for d, _ in out]


def build_nsw(X, max_degree, ef):
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    nbrs = np.full((n, max_degree + 1), -1, dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    for i in range(1, n):
        q = X[i]
        cand, dcand = _search_layer(X, nbrs, deg, q, 0, max(ef, max_degree))
        sel = _select_neighbors(X, cand, dcand, max_degree)
        deg[i] = len(sel)
        nbrs[i, :len(sel)] = sel
        for e in sel:
            k = deg[e]
            nbrs[e, k] = i
            deg[e] = k + 1
            if k + 1 > max_degree:
                row = nbrs[e, :k + 1].copy()
                diff = X[row] - X[e]
                de = np.einsum("ij,ij->i", diff, diff)
                order = np.lexsort((row, de))
                sel_e = _select_neighbors(X, row[order].tolist(), de[order].tolist(), max_degree)
                nbrs[e, :max_degree] = sel_e
                nbrs[e, max_degree] = -1
                deg[e] = max_degree
    return nbrs[:, :max_degree].copy(), deg


def bfs(indptr, indices, source):
    n = len(indptr) - 1
    dist = np.full(n, -1, dtype=np.int32)
    dist[source] = 0
    dq = deque([source])
    while dq:
        v = dq.popleft()
        dv = dist[v] + 1
        for u in indices[indptr[v]:indptr[v + 1]]:
            if dist[u] < 0:
                dist[u] = dv
                dq.append(u)
    return dist


def _pick(policy, h_ids, h_sc, u, ref_dt):
    """Index into the heap arrays of the vertex to expand, or -1 to stop."""
    if policy == POLICY_BEST:
        best = 0
        for j in range(1, len(h_ids)):
            if h_sc[j] > h_sc[best] or (h_sc[j] == h_sc[best] and h_ids[j] < h_ids[best]):
                best = j
        return best
    if policy == POLICY_SOFTMAX:
        m = max(h_sc)
        w = [math.exp(s - m) for s in h_sc]
        total = 0.0
        for x in w:
            total += x
        thresh = u * total
        acc = 0.0
        for j, x in enumerate(w):
            acc += x
            if acc > thresh:
                return j
        # u*total rounded up to the full sum; fall back to last positive weight
        for j in range(len(w) - 1, -1, -1):
            if w[j] > 0.0:
                return j
        return len(w) - 1
    # POLICY_REF: uniform over heap members with minimal cached hop distance
    best = -1
    count = 0
    for j, v in enumerate(h_ids):
        dt = ref_dt[v]
        if dt < 0:
            continue
        if best < 0 or dt < best:
            best = dt
            count = 1
        elif dt == best:
            count += 1
    if best < 0:
        return -1
    pick = min(int(u * count), count - 1)
    for j, v in enumerate(h_ids):
        if ref_dt[v] == best:
            if pick == 0:
                return j
            pick -= 1
    return -1


def search(indptr, indices, entry, X, q, metric, tau, max_scorings, policy,
           uniforms, ref_dt, target, record, beam_cap):
    """Budgeted best-first traversal (see ``search.beam_search``).

    Returns ``(visited, scores, expanded, visited_after, heap_ptr, heap_ids)``.
    """
    n = len(indptr) - 1
    visited_flag = np.zeros(n, dtype=bool)

    def score_many(ids):
        rows = X[ids]
        if metric == SCORE_DOT:
            return rows @ q
        diff = rows - q
        return -np.sqrt(np.einsum("ij,ij->i", diff, diff)) / tau

    visited = [entry]
    visited_flag[entry] = True
    if max_scorings < 1:
        return (np.array(visited, np.int32), np.array([-np.inf]), np.zeros(0, np.int32),
                np.zeros(0, np.int32), np.zeros(1, np.int64), np.zeros(0, np.int32))
    scores = [float(score_many([entry])[0])]
    n_scored = 1
    h_ids = [entry]
    h_sc = [scores[0]]
    expanded = []
    visited_after = []
    heap_ptr = [0]
    heap_ids = []
    step = 0
    while h_ids and n_scored < max_scorings:
        u = uniforms[step] if policy != POLICY_BEST else 0.0
        j = _pick(policy, h_ids, h_sc, u, ref_dt)
        if j < 0:
            break
        if record:
            heap_ids.extend(h_ids)
            heap_ptr.append(len(heap_ids))
        v = h_ids.pop(j)
        h_sc.pop(j)
        expanded.append(v)
        step += 1
        if v == target:
            visited_after.append(len(visited))
            break
        new = []
        exhausted = False
        for w in indices[indptr[v]:indptr[v + 1]]:
            if visited_flag[w]:
                continue
            if n_scored + len(new) >= max_scorings:
                exhausted = True
                break
            visited_flag[w] = True
            new.append(int(w))
        if new:
            sc = score_many(new)
            n_scored += len(new)
            for w, s in zip(new, sc):
                s = float(s)
                visited.append(w)
                scores.append(s)
                h_ids.append(w)
                h_sc.append(s)
                if beam_cap > 0 and len(h_ids) > beam_cap:
                    worst = 0
                    for t in range(1, len(h_ids)):
                        if h_sc[t] < h_sc[worst] or (h_sc[t] == h_sc[worst] and h_ids[t] > h_ids[worst]):
                            worst = t
                    h_ids.pop(worst)
                    h_sc.pop(worst)
        visited_after.append(len(visited))
        if exhausted:
            break
    return (np.array(visited, np.int32), np.array(scores, np.float64),
            np.array(expanded, np.int32), np.array(visited_after, np.int32),
            np.array(heap_ptr, np.int64), np.array(heap_ids, np.int32))
