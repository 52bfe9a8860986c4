"""Recall metrics, hop curves and the budget comparison grid."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import pca_fit, pca_transform
from .graph import SimilarityGraph, build_nsw, symmetrize
from .model import RoutingModel, normalized_adjacency
from .search import (Scorer, ScorerMode, SearchConfig, SearchTrajectory, routing_budget,
                     search_query)

REPORT_VERSION = 1


def recall_at_R(results, nearest, R: int) -> float:
    """Fraction of queries whose true nearest neighbor is among the first ``R`` results."""
    if R < 1:
        raise ValueError("R must be >= 1")
    nearest = np.asarray(nearest).ravel()
    if len(results) != nearest.size:
        raise ValueError("results and ground truth differ in length")
    if nearest.size == 0:
        return 0.0
    hits = sum(int(t in np.asarray(r)[:R]) for r, t in zip(results, nearest))
    return hits / nearest.size


@dataclass
class HopCurve:
    hops: np.ndarray
    expanded: np.ndarray  # v* popped within the first h expansions
    visited: np.ndarray  # v* scored within the first h expansions


def _first_index(arr: np.ndarray, value: int) -> int:
    hit = np.flatnonzero(np.asarray(arr) == value)
    return int(hit[0]) if hit.size else -1


def routing_success_vs_hops(trajectories: list[SearchTrajectory], nearest, max_hops: int) -> HopCurve:
    """Success rate as a function of the number of expansions.

    Point ``h`` counts queries whose v* was expanded (or, for the second
    curve, scored) by the end of the ``h``-th expansion. At ``h = 0`` only
    the entry vertex has been scored.
    """
    nearest = np.asarray(nearest).ravel()
    if len(trajectories) != nearest.size:
        raise ValueError("trajectories and ground truth differ in length")
    hops = np.arange(max_hops + 1)
    n = max(nearest.size, 1)
    exp_at = np.full(nearest.size, np.iinfo(np.int64).max)
    vis_at = np.full(nearest.size, np.iinfo(np.int64).max)
    for i, (t, vs) in enumerate(zip(trajectories, nearest)):
        e = _first_index(t.expanded, vs)
        if e >= 0:
            exp_at[i] = e + 1
        p = _first_index(t.visited, vs)
        if p == 0:
            vis_at[i] = 0
        elif p > 0:
            # first expansion after which v* is inside the visited prefix
            vis_at[i] = int(np.searchsorted(np.asarray(t.visited_after), p + 1)) + 1
    expanded = np.array([(exp_at <= h).sum() / n for h in hops])
    visited = np.array([(vis_at <= h).sum() / n for h in hops])
    return HopCurve(hops, expanded, visited)


# ---------------------------------------------------------------------------
# comparison grid


@dataclass(frozen=True)
class GridPoint:
    """One report row: a scorer at a budget."""

    mode: ScorerMode
    dcs_budget: int
    k: int = 0
    dim: int | None = None  # routing dimension; None = full

    @property
    def label(self) -> str:
        if self.mode is ScorerMode.ORIGINAL:
            return "original"
        return f"{ScorerMode(self.mode).value}-d{self.dim}" if self.dim else ScorerMode(self.mode).value


@dataclass
class EvalRow:
    dataset: str
    dcs: int
    scorer: str
    k: int
    d: int
    rdcs: float
    recall_at_1: float
    recall_at_R: list[float]
    mean_hops: float
    mean_dcs_used: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    R_values: list[int] = field(default_factory=lambda: [1, 10])
    config: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "R_values": list(self.R_values), "config": dict(self.config),
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(rows=[EvalRow(**r) for r in obj["rows"]], R_values=list(obj["R_values"]),
                   config=dict(obj.get("config", {})), version=int(obj["version"]))


def _evaluate(graph, scorer, base, queries, nearest, cfg: SearchConfig, R_values):
    results, hops, used = [], [], []
    for q in queries:
        res = search_query(graph, scorer, base, q, cfg)
        results.append(res.ids)
        hops.append(res.trajectory.num_steps)
        used.append(res.dcs_used)
    recalls = [recall_at_R(results, nearest, R) for R in R_values]
    return recalls, float(np.mean(hops)) if hops else 0.0, float(np.mean(used)) if used else 0.0


def run_comparison(base: np.ndarray, graph: SimilarityGraph, queries: np.ndarray, nearest,
                   grid: list[GridPoint], dataset_name: str = "", model: RoutingModel | None = None,
                   R_values=(1, 10), tau: float = 1.0, max_degree: int = 16,
                   ef_construction: int = 200, config: dict | None = None) -> EvalReport:
    """Deterministic beam search plus rerank for every grid point over all queries.

    ORIGINAL rows route on the full vectors with no rerank reserve.
    TRUNCATED rows route on a PCA projection over a graph built on the
    projected points and rerank on the full vectors. LEARNED rows need
    ``model``; its output width is the routing dimension.
    """
    R_values = sorted(set(int(r) for r in R_values) | {1})
    base64 = np.asarray(base, dtype=np.float64)
    D = base64.shape[1]
    report = EvalReport(R_values=R_values, config=dict(config or {}))
    pca_cache: dict[int, tuple] = {}
    learned = None
    for gp in grid:
        mode = ScorerMode(gp.mode)
        if mode is ScorerMode.ORIGINAL:
            scorer, g, k, d = Scorer.original(base64, tau), graph, 0, D
        elif mode is ScorerMode.TRUNCATED:
            d = int(gp.dim or D)
            if d not in pca_cache:
                pca = pca_fit(base64, d)
                low = pca_transform(pca, base64)
                pca_cache[d] = (Scorer.truncated(pca, low, tau),
                                build_nsw(low, max_degree, ef_construction))
            scorer, g = pca_cache[d]
            k = gp.k
        else:
            if model is None:
                raise ValueError("learned rows need a trained model")
            if learned is None:
                A_hat = normalized_adjacency(symmetrize(graph))
                learned = Scorer.learned(model.forward_f(A_hat, base64), model.g, D)
            scorer, g, k, d = learned, graph, gp.k, model.config.out_dim
        cfg = SearchConfig(gp.dcs_budget, k, tau=tau, mode=mode)
        recalls, mean_hops, mean_used = _evaluate(g, scorer, base64, queries, nearest, cfg, R_values)
        report.rows.append(EvalRow(
            dataset=dataset_name, dcs=gp.dcs_budget, scorer=gp.label, k=k, d=d,
            rdcs=routing_budget(gp.dcs_budget, k, d, D), recall_at_1=recalls[0],
            recall_at_R=recalls, mean_hops=mean_hops, mean_dcs_used=mean_used,
        ))
    return report


# ---------------------------------------------------------------------------
# output

CSV_COLUMNS = [f.name for f in fields(EvalRow)]


def _csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        vals = asdict(r)
        vals["recall_at_R"] = ";".join(f"R{R}={v:.6f}" for R, v in zip(report.R_values, r.recall_at_R))
        w.writerow([f"{vals[c]:.6f}" if isinstance(vals[c], float) else vals[c] for c in CSV_COLUMNS])
    return buf.getvalue()


def write_report(report: EvalReport, path, format: str = "csv") -> None:
    """Write ``report`` as CSV (one row per grid point) or JSON (full fidelity)."""
    fmt = format.lower()
    if fmt == "csv":
        text = _csv_text(report)
    elif fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def read_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as f:
        return EvalReport.from_dict(json.load(f))
