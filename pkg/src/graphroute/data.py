"""Dataset ingestion, synthetic generation, exact ground truth and PCA.

The fvecs/ivecs layout is the one used by the texmex benchmark corpus: each
record is a little-endian int32 dimension followed by that many 4-byte
values (float32 for fvecs, int32 for ivecs).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Raised when a binary file does not match its declared layout."""


@dataclass
class VectorDataset:
    base: np.ndarray
    train_queries: np.ndarray
    test_queries: np.ndarray
    name: str = "dataset"
    # generator metadata (only set for synthetic data)
    centers: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)
    spread: float | None = None

    def __post_init__(self):
        dims = {m.shape[1] for m in (self.base, self.train_queries, self.test_queries) if m.size}
        if len(dims) > 1:
            raise ValueError(f"column counts differ: {sorted(dims)}")
        if self.base.shape[0] < 1:
            raise ValueError("base set must contain at least one vector")
        for m in (self.base, self.train_queries, self.test_queries):
            if not np.all(np.isfinite(m)):
                raise ValueError("non-finite coordinate in dataset")

    @property
    def dim(self) -> int:
        return self.base.shape[1]


@dataclass
class GroundTruth:
    """Exact top-R neighbors per query; ``ids[:, 0]`` is the true NN."""

    ids: np.ndarray
    distances: np.ndarray

    @property
    def nearest(self) -> np.ndarray:
        return self.ids[:, 0]

    @property
    def R(self) -> int:
        return self.ids.shape[1]


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray
    rank_deficient: bool = False

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def compression(self) -> float:
        return self.in_dim / self.out_dim


# ---------------------------------------------------------------------------
# fvecs / ivecs


def _read_vecs(path, dtype) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=dtype)
    if raw.size % 4:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of 4")
    words = raw.view("<i4")
    d = int(words[0])
    if d <= 0:
        raise FormatError(f"{path}: invalid record dimension {d}")
    if words.size % (d + 1):
        raise FormatError(f"{path}: truncated record (dim {d}, {words.size} words)")
    recs = words.reshape(-1, d + 1)
    if np.any(recs[:, 0] != d):
        raise FormatError(f"{path}: inconsistent record dimensions")
    payload = np.ascontiguousarray(recs[:, 1:])
    return payload.view("<f4" if dtype == np.float32 else "<i4").astype(dtype)


def _write_vecs(path, M: np.ndarray, dtype) -> None:
    M = np.asarray(M)
    if M.size == 0:
        open(path, "wb").close()
        return
    if M.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    n, d = M.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = np.ascontiguousarray(M, dtype="<f4" if dtype == np.float32 else "<i4").view("<i4")
    out.tofile(path)


def load_fvecs(path) -> np.ndarray:
    return _read_vecs(path, np.float32)


def load_ivecs(path) -> np.ndarray:
    return _read_vecs(path, np.int32)


def write_fvecs(path, M) -> None:
    _write_vecs(path, M, np.float32)


def write_ivecs(path, M) -> None:
    _write_vecs(path, M, np.int32)


# ---------------------------------------------------------------------------
# synthetic data

SPLIT = (8, 1, 1)


def generate_synthetic(n: int, d: int, clusters: int, seed: int,
                       spread: float = 0.35, name: str | None = None) -> VectorDataset:
    """Gaussian-mixture dataset split 8:1:1 into base / train / test.

    Cluster centers are drawn from N(0, I); each point is its center plus
    isotropic noise of standard deviation ``spread``. Points are i.i.d., so
    the contiguous split keeps every part on the same distribution.
    """
    if n < 10:
        raise ValueError("n must be at least 10")
    if not 1 <= clusters <= n:
        raise ValueError("need 1 <= clusters <= n")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, d))
    labels = rng.integers(0, clusters, size=n)
    points = centers[labels] + spread * rng.standard_normal((n, d))
    points = points.astype(np.float32)
    n_base = n * SPLIT[0] // sum(SPLIT)
    n_train = n * SPLIT[1] // sum(SPLIT)
    return VectorDataset(
        base=points[:n_base],
        train_queries=points[n_base:n_base + n_train],
        test_queries=points[n_base + n_train:],
        name=name or f"synth-n{n}-d{d}-c{clusters}-s{seed}",
        centers=centers,
        labels=labels,
        spread=spread,
    )


def sample_mixture(ds: VectorDataset, count: int, seed: int) -> np.ndarray:
    """Fresh float32 points from the mixture that generated ``ds``.

    Useful as extra training queries: they follow the query distribution
    but are disjoint from every split.
    """
    if ds.centers is None or ds.spread is None:
        raise ValueError("dataset carries no generator metadata")
    rng = np.random.default_rng(seed)
    k, d = ds.centers.shape
    labels = rng.integers(0, k, size=count)
    return (ds.centers[labels] + ds.spread * rng.standard_normal((count, d))).astype(np.float32)


def save_dataset(ds: VectorDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    write_fvecs(os.path.join(directory, "base.fvecs"), ds.base)
    write_fvecs(os.path.join(directory, "learn.fvecs"), ds.train_queries)
    write_fvecs(os.path.join(directory, "query.fvecs"), ds.test_queries)


def load_dataset(directory, name: str | None = None) -> VectorDataset:
    def opt(fname):
        p = os.path.join(directory, fname)
        return load_fvecs(p) if os.path.exists(p) else None

    base = load_fvecs(os.path.join(directory, "base.fvecs"))
    d = base.shape[1]
    empty = np.zeros((0, d), dtype=np.float32)
    train = opt("learn.fvecs")
    test = opt("query.fvecs")
    return VectorDataset(
        base=base,
        train_queries=empty if train is None or train.size == 0 else train,
        test_queries=empty if test is None or test.size == 0 else test,
        name=name or os.path.basename(os.path.normpath(directory)),
    )


# ---------------------------------------------------------------------------
# ground truth


def exact_knn(base: np.ndarray, queries: np.ndarray, R: int, chunk: int = 256) -> GroundTruth:
    """Exhaustive Euclidean top-R; ties go to the smaller identifier.

    A BLAS pass shortlists ``R + slack`` candidates per query; their distances
    are then recomputed from explicit differences, so zero distances and ties
    are exact.
    """
    base = np.asarray(base, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if base.shape[1] != queries.shape[1]:
        raise ValueError("base and queries differ in dimensionality")
    N = base.shape[0]
    if not 1 <= R <= N:
        raise ValueError("R must lie in [1, N]")
    nq = queries.shape[0]
    ids = np.empty((nq, R), dtype=np.int64)
    dists = np.empty((nq, R), dtype=np.float64)
    shortlist = min(N, R + 32)
    sq_base = np.einsum("ij,ij->i", base, base)
    for lo in range(0, nq, chunk):
        Q = queries[lo:lo + chunk]
        approx = sq_base[None, :] - 2.0 * Q @ base.T
        if shortlist < N:
            cand = np.argpartition(approx, shortlist - 1, axis=1)[:, :shortlist]
        else:
            cand = np.broadcast_to(np.arange(N), (Q.shape[0], N))
        for j in range(Q.shape[0]):
            c = cand[j]
            diff = base[c] - Q[j]
            d2 = np.einsum("ij,ij->i", diff, diff)
            order = np.lexsort((c, d2))[:R]
            ids[lo + j] = c[order]
            dists[lo + j] = np.sqrt(d2[order])
    return GroundTruth(ids=ids, distances=dists)


# ---------------------------------------------------------------------------
# PCA


def pca_fit(base: np.ndarray, d: int) -> PCAModel:
    X = np.asarray(base, dtype=np.float64)
    n, D = X.shape
    if not 1 <= d <= D:
        raise ValueError("need 1 <= d <= D")
    if n < d:
        raise ValueError("need at least d base vectors")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    comps = evecs[:, :d].T.copy()
    tol = max(evals[0], 1.0) * 1e-10 if evals.size else 0.0
    deficient = bool(np.sum(evals > tol) < d)
    if deficient:
        # eigh already returns an orthonormal basis of the null space, so the
        # trailing rows are a valid completion; re-orthonormalize to be safe
        q, _ = np.linalg.qr(comps.T)
        comps = q.T[:d]
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(d), idx])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    return PCAModel(mean=mean, components=comps, rank_deficient=deficient)


def pca_transform(model: PCAModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.in_dim:
        raise ValueError(f"expected {model.in_dim} columns, got {X.shape[-1]}")
    return (X - model.mean) @ model.components.T


def pca_inverse(model: PCAModel, Y: np.ndarray) -> np.ndarray:
    return np.asarray(Y) @ model.components + model.mean


def explained_variance(model: PCAModel, base: np.ndarray) -> np.ndarray:
    Xc = np.asarray(base, dtype=np.float64) - model.mean
    Y = Xc @ model.components.T
    return (Y ** 2).sum(axis=0) / max(Xc.shape[0] - 1, 1)
