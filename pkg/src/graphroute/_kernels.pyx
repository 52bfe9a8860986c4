# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: NSW construction, BFS and budgeted traversal.

Semantics match ``_kernels_py`` exactly; only the execution model differs.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memmove

cnp.import_array()

SCORE_NEG_L2 = 0
SCORE_DOT = 1
POLICY_BEST = 0
POLICY_SOFTMAX = 1
POLICY_REF = 2

BACKEND = "cython"


cdef inline double _sqdist(const double[:, ::1] X, Py_ssize_t i, const double* q, Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t k
    for k in range(d):
        t = X[i, k] - q[k]
        acc += t * t
    return acc


# ---------------------------------------------------------------------------
# (distance, id) binary heaps; lexicographic order

cdef inline bint _lt(double da, int ia, double db, int ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


cdef void _minheap_push(double* hd, int* hi, Py_ssize_t* size, double d, int i) noexcept nogil:
    cdef Py_ssize_t k = size[0], p
    size[0] += 1
    while k > 0:
        p = (k - 1) >> 1
        if _lt(d, i, hd[p], hi[p]):
            hd[k] = hd[p]; hi[k] = hi[p]
            k = p
        else:
            break
    hd[k] = d; hi[k] = i


cdef void _minheap_pop(double* hd, int* hi, Py_ssize_t* size) noexcept nogil:
    cdef Py_ssize_t n = size[0] - 1, k = 0, c
    cdef double d = hd[n]
    cdef int i = hi[n]
    size[0] = n
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        if c + 1 < n and _lt(hd[c + 1], hi[c + 1], hd[c], hi[c]):
            c += 1
        if _lt(hd[c], hi[c], d, i):
            hd[k] = hd[c]; hi[k] = hi[c]
            k = c
        else:
            break
    if n > 0:
        hd[k] = d; hi[k] = i


cdef void _maxheap_push(double* hd, int* hi, Py_ssize_t* size, double d, int i) noexcept nogil:
    cdef Py_ssize_t k = size[0], p
    size[0] += 1
    while k > 0:
        p = (k - 1) >> 1
        if _lt(hd[p], hi[p], d, i):
            hd[k] = hd[p]; hi[k] = hi[p]
            k = p
        else:
            break
    hd[k] = d; hi[k] = i


cdef void _maxheap_pop(double* hd, int* hi, Py_ssize_t* size) noexcept nogil:
    cdef Py_ssize_t n = size[0] - 1, k = 0, c
    cdef double d = hd[n]
    cdef int i = hi[n]
    size[0] = n
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        if c + 1 < n and _lt(hd[c], hi[c], hd[c + 1], hi[c + 1]):
            c += 1
        if _lt(d, i, hd[c], hi[c]):
            hd[k] = hd[c]; hi[k] = hi[c]
            k = c
        else:
            break
    if n > 0:
        hd[k] = d; hi[k] = i


cdef Py_ssize_t _heuristic(const double[:, ::1] X, Py_ssize_t dim, const int* cand, const double* cd,
                           Py_ssize_t m, Py_ssize_t max_degree, int* kept, int* dropped) noexcept nogil:
    """Heuristic selection with nearest-first fill over ``cand`` (ascending)."""
    cdef Py_ssize_t t, k, nkept = 0, ndropped = 0
    cdef bint good
    for t in range(m):
        if nkept >= max_degree:
            break
        good = True
        for k in range(nkept):
            if _sqdist(X, cand[t], &X[kept[k], 0], dim) <= cd[t]:
                good = False
                break
        if good:
            kept[nkept] = cand[t]
            nkept += 1
        else:
            dropped[ndropped] = cand[t]
            ndropped += 1
    for t in range(ndropped):
        if nkept >= max_degree:
            break
        kept[nkept] = dropped[t]
        nkept += 1
    return nkept


# ---------------------------------------------------------------------------
# construction

def build_nsw(X_in, int max_degree, int ef):
    cdef const double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], dim = X.shape[1]
    nbrs_arr = np.full((n, max_degree + 1), -1, dtype=np.int32)
    deg_arr = np.zeros(n, dtype=np.int32)
    cdef int[:, ::1] nbrs = nbrs_arr
    cdef int[::1] deg = deg_arr
    cdef int[::1] stamp = np.zeros(n, dtype=np.int32)
    if ef < max_degree:
        ef = max_degree
    cdef double* cd = <double*> malloc(n * sizeof(double))
    cdef int* ci = <int*> malloc(n * sizeof(int))
    cdef double* rd = <double*> malloc((ef + 2) * sizeof(double))
    cdef int* ri = <int*> malloc((ef + 2) * sizeof(int))
    cdef double* sd = <double*> malloc((ef + 2) * sizeof(double))
    cdef int* si = <int*> malloc((ef + 2) * sizeof(int))
    cdef int* kept = <int*> malloc((max_degree + 1) * sizeof(int))
    cdef int* kept2 = <int*> malloc((max_degree + 1) * sizeof(int))
    cdef int* dropped = <int*> malloc((ef + max_degree + 2) * sizeof(int))
    cdef double* tmpd = <double*> malloc((max_degree + 2) * sizeof(double))
    cdef int* tmpi = <int*> malloc((max_degree + 2) * sizeof(int))
    cdef Py_ssize_t i, j, t, e, csize, rsize, m, nkept, nkept2, k, a, b
    cdef int c, u, w, gen = 0
    cdef double dc, du, d0
    try:
        with nogil:
            for i in range(1, n):
                gen += 1
                # ef-bounded best-first search from vertex 0
                csize = 0
                rsize = 0
                d0 = _sqdist(X, 0, &X[i, 0], dim)
                stamp[0] = gen
                _minheap_push(cd, ci, &csize, d0, 0)
                _maxheap_push(rd, ri, &rsize, d0, 0)
                while csize > 0:
                    dc = cd[0]
                    c = ci[0]
                    if dc > rd[0] and rsize >= ef:
                        break
                    _minheap_pop(cd, ci, &csize)
                    for t in range(deg[c]):
                        u = nbrs[c, t]
                        if stamp[u] == gen:
                            continue
                        stamp[u] = gen
                        du = _sqdist(X, u, &X[i, 0], dim)
                        if rsize < ef or _lt(du, u, rd[0], ri[0]):
                            _minheap_push(cd, ci, &csize, du, u)
                            _maxheap_push(rd, ri, &rsize, du, u)
                            if rsize > ef:
                                _maxheap_pop(rd, ri, &rsize)
                # drain results into ascending order
                m = rsize
                for t in range(m - 1, -1, -1):
                    sd[t] = rd[0]
                    si[t] = ri[0]
                    _maxheap_pop(rd, ri, &rsize)
                nkept = _heuristic(X, dim, si, sd, m, max_degree, kept, dropped)
                deg[i] = <int> nkept
                for t in range(nkept):
                    nbrs[i, t] = kept[t]
                # reverse links; overfull lists are re-selected with the same heuristic
                for t in range(nkept):
                    e = kept[t]
                    k = deg[e]
                    nbrs[e, k] = <int> i
                    deg[e] = <int> (k + 1)
                    if k + 1 > max_degree:
                        for a in range(k + 1):
                            tmpi[a] = nbrs[e, a]
                            tmpd[a] = _sqdist(X, tmpi[a], &X[e, 0], dim)
                        # insertion sort on (distance, id); lists are short
                        for a in range(1, k + 1):
                            du = tmpd[a]
                            w = tmpi[a]
                            b = a - 1
                            while b >= 0 and _lt(du, w, tmpd[b], tmpi[b]):
                                tmpd[b + 1] = tmpd[b]
                                tmpi[b + 1] = tmpi[b]
                                b -= 1
                            tmpd[b + 1] = du
                            tmpi[b + 1] = w
                        nkept2 = _heuristic(X, dim, tmpi, tmpd, k + 1, max_degree, kept2, dropped)
                        for a in range(nkept2):
                            nbrs[e, a] = kept2[a]
                        nbrs[e, max_degree] = -1
                        deg[e] = max_degree
    finally:
        free(cd); free(ci); free(rd); free(ri); free(sd); free(si)
        free(kept); free(kept2); free(dropped); free(tmpd); free(tmpi)
    return nbrs_arr[:, :max_degree].copy(), deg_arr


# ---------------------------------------------------------------------------
# BFS

def bfs(indptr_in, indices_in, Py_ssize_t source):
    cdef const long long[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef const int[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int32)
    cdef Py_ssize_t n = indptr.shape[0] - 1
    dist_arr = np.full(n, -1, dtype=np.int32)
    cdef int[::1] dist = dist_arr
    cdef int[::1] queue = np.empty(max(n, 1), dtype=np.int32)
    cdef Py_ssize_t head = 0, tail = 0, t
    cdef int v, u, dv
    with nogil:
        dist[source] = 0
        queue[tail] = <int> source
        tail += 1
        while head < tail:
            v = queue[head]
            head += 1
            dv = dist[v] + 1
            for t in range(indptr[v], indptr[v + 1]):
                u = indices[t]
                if dist[u] < 0:
                    dist[u] = dv
                    queue[tail] = u
                    tail += 1
    return dist_arr


# ---------------------------------------------------------------------------
# budgeted traversal

cdef struct IntBuf:
    int* data
    Py_ssize_t size
    Py_ssize_t cap


cdef int _buf_push(IntBuf* b, int x) noexcept nogil:
    cdef int* nd
    if b.size == b.cap:
        b.cap = b.cap * 2 if b.cap > 0 else 64
        nd = <int*> realloc(b.data, b.cap * sizeof(int))
        if nd == NULL:
            return -1
        b.data = nd
    b.data[b.size] = x
    b.size += 1
    return 0


cdef inline double _score(const double[:, ::1] X, Py_ssize_t v, const double* q, Py_ssize_t d,
                          int metric, double tau) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t k
    if metric == 1:
        for k in range(d):
            acc += X[v, k] * q[k]
        return acc
    return -sqrt(_sqdist(X, v, q, d)) / tau


cdef Py_ssize_t _pick(int policy, int* h_ids, double* h_sc, Py_ssize_t hn, double u,
                      const int[::1] ref_dt) noexcept nogil:
    cdef Py_ssize_t j, best = 0, count = 0, pick
    cdef double m, total, thresh, acc
    cdef int bd = -1, dt
    if policy == 0:
        for j in range(1, hn):
            if h_sc[j] > h_sc[best] or (h_sc[j] == h_sc[best] and h_ids[j] < h_ids[best]):
                best = j
        return best
    if policy == 1:
        m = h_sc[0]
        for j in range(1, hn):
            if h_sc[j] > m:
                m = h_sc[j]
        total = 0.0
        for j in range(hn):
            total += exp(h_sc[j] - m)
        thresh = u * total
        acc = 0.0
        for j in range(hn):
            acc += exp(h_sc[j] - m)
            if acc > thresh:
                return j
        for j in range(hn - 1, -1, -1):
            if exp(h_sc[j] - m) > 0.0:
                return j
        return hn - 1
    for j in range(hn):
        dt = ref_dt[h_ids[j]]
        if dt < 0:
            continue
        if bd < 0 or dt < bd:
            bd = dt
            count = 1
        elif dt == bd:
            count += 1
    if bd < 0:
        return -1
    pick = <Py_ssize_t> (u * count)
    if pick > count - 1:
        pick = count - 1
    for j in range(hn):
        if ref_dt[h_ids[j]] == bd:
            if pick == 0:
                return j
            pick -= 1
    return -1


def search(indptr_in, indices_in, int entry, X_in, q_in, int metric, double tau,
           long long max_scorings, int policy, uniforms_in, ref_dt_in, int target,
           bint record, Py_ssize_t beam_cap):
    cdef const long long[::1] indptr = np.ascontiguousarray(indptr_in, dtype=np.int64)
    cdef const int[::1] indices = np.ascontiguousarray(indices_in, dtype=np.int32)
    cdef const double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef const double[::1] q = np.ascontiguousarray(q_in, dtype=np.float64)
    cdef Py_ssize_t n = indptr.shape[0] - 1, dim = X.shape[1]
    uarr = np.ascontiguousarray(uniforms_in, dtype=np.float64)
    if uarr.size == 0:
        uarr = np.zeros(1)
    cdef const double[::1] uniforms = uarr
    rarr = np.ascontiguousarray(ref_dt_in, dtype=np.int32)
    if rarr.size == 0:
        rarr = np.full(1, -1, dtype=np.int32)
    cdef const int[::1] ref_dt = rarr

    if max_scorings < 1:
        return (np.array([entry], np.int32), np.array([-np.inf]), np.zeros(0, np.int32),
                np.zeros(0, np.int32), np.zeros(1, np.int64), np.zeros(0, np.int32))

    cdef Py_ssize_t cap = min(<Py_ssize_t> max_scorings, n) + 1
    vis_arr = np.empty(cap, dtype=np.int32)
    sc_arr = np.empty(cap, dtype=np.float64)
    exp_arr = np.empty(cap, dtype=np.int32)
    after_arr = np.empty(cap, dtype=np.int32)
    ptr_arr = np.zeros(cap + 1, dtype=np.int64)
    cdef int[::1] vis = vis_arr
    cdef double[::1] scs = sc_arr
    cdef int[::1] expd = exp_arr
    cdef int[::1] after = after_arr
    cdef long long[::1] hptr = ptr_arr
    cdef cnp.uint8_t[::1] flag = np.zeros(n, dtype=np.uint8)
    cdef int* h_ids = <int*> malloc(cap * sizeof(int))
    cdef double* h_sc = <double*> malloc(cap * sizeof(double))
    cdef IntBuf rec
    rec.data = NULL
    rec.size = 0
    rec.cap = 0
    cdef Py_ssize_t nv = 0, ne = 0, hn = 0, j, t, worst, step = 0
    cdef long long n_scored
    cdef int v, w
    cdef double s, u
    cdef bint exhausted, failed = False
    try:
        with nogil:
            s = _score(X, entry, &q[0], dim, metric, tau)
            flag[entry] = 1
            vis[0] = entry
            scs[0] = s
            nv = 1
            n_scored = 1
            h_ids[0] = entry
            h_sc[0] = s
            hn = 1
            while hn > 0 and n_scored < max_scorings:
                u = uniforms[step] if policy != 0 else 0.0
                j = _pick(policy, h_ids, h_sc, hn, u, ref_dt)
                if j < 0:
                    break
                if record:
                    for t in range(hn):
                        if _buf_push(&rec, h_ids[t]) < 0:
                            failed = True
                    hptr[ne + 1] = rec.size
                v = h_ids[j]
                memmove(&h_ids[j], &h_ids[j + 1], (hn - j - 1) * sizeof(int))
                memmove(&h_sc[j], &h_sc[j + 1], (hn - j - 1) * sizeof(double))
                hn -= 1
                expd[ne] = v
                ne += 1
                step += 1
                if v == target:
                    after[ne - 1] = <int> nv
                    break
                exhausted = False
                for t in range(indptr[v], indptr[v + 1]):
                    w = indices[t]
                    if flag[w]:
                        continue
                    if n_scored >= max_scorings:
                        exhausted = True
                        break
                    flag[w] = 1
                    s = _score(X, w, &q[0], dim, metric, tau)
                    n_scored += 1
                    vis[nv] = w
                    scs[nv] = s
                    nv += 1
                    h_ids[hn] = w
                    h_sc[hn] = s
                    hn += 1
                    if beam_cap > 0 and hn > beam_cap:
                        worst = 0
                        for j in range(1, hn):
                            if h_sc[j] < h_sc[worst] or (h_sc[j] == h_sc[worst] and h_ids[j] > h_ids[worst]):
                                worst = j
                        memmove(&h_ids[worst], &h_ids[worst + 1], (hn - worst - 1) * sizeof(int))
                        memmove(&h_sc[worst], &h_sc[worst + 1], (hn - worst - 1) * sizeof(double))
                        hn -= 1
                after[ne - 1] = <int> nv
                if exhausted:
                    break
        if failed:
            raise MemoryError("heap snapshot buffer")
        if record and rec.size > 0:
            heap_ids = np.asarray(<int[:rec.size]> rec.data).copy()
        else:
            heap_ids = np.zeros(0, np.int32)
    finally:
        free(h_ids)
        free(h_sc)
        free(rec.data)
    if not record:
        ptr_out = np.zeros(1, np.int64)
    else:
        ptr_out = ptr_arr[:ne + 1].copy()
    return (vis_arr[:nv].copy(), sc_arr[:nv].copy(), exp_arr[:ne].copy(),
            after_arr[:ne].copy(), ptr_out, heap_ids)
