"""Structure-recovery metrics: SHD / nSHD, directed-edge F1, average precision."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .factorized import DirectedMarginals, EdgeBeliefs, directed_marginals, map_prediction
from .graphs import DimensionMismatchError, DirectedGraph


def _check(pred: DirectedGraph, truth: DirectedGraph):
    if pred.p != truth.p:
        raise DimensionMismatchError(f"prediction has p={pred.p}, truth has p={truth.p}")


def _pair_status(g: DirectedGraph) -> np.ndarray:
    """Per unordered pair j<k: 0 none, 1 for j->k, 2 for k->j."""
    iu = np.triu_indices(g.p, 1)
    return g.adj[iu].astype(np.int8) + 2 * g.adj.T[iu].astype(np.int8)


def shd(pred: DirectedGraph, truth: DirectedGraph) -> int:
    """Pairs whose edge status differs; a reversed edge counts once."""
    _check(pred, truth)
    return int(np.sum(_pair_status(pred) != _pair_status(truth)))


def nshd(pred: DirectedGraph, truth: DirectedGraph) -> float:
    return shd(pred, truth) / max(truth.n_edges, 1)


def edge_counts(pred: DirectedGraph, truth: DirectedGraph) -> dict:
    _check(pred, truth)
    P, T = pred.adj.astype(bool), truth.adj.astype(bool)
    return {
        "tp": int(np.sum(P & T)),
        "fp": int(np.sum(P & ~T)),
        "fn": int(np.sum(~P & T)),
        "reversals": int(np.sum(P & T.T & ~T)),
    }


def f1(pred: DirectedGraph, truth: DirectedGraph) -> float:
    c = edge_counts(pred, truth)
    n_pred, n_true = pred.n_edges, truth.n_edges
    if n_pred == 0 and n_true == 0:
        return 1.0
    if n_pred == 0 or n_true == 0:
        return 0.0
    return 2 * c["tp"] / (n_pred + n_true)


def average_precision(marginals: DirectedMarginals | np.ndarray, truth: DirectedGraph) -> float:
    """AP of the ordered-pair ranking by score, one step per distinct score.

    Tied pairs enter the ranking together, so a tie group contributes its
    pooled precision. Returns 1.0 when the truth has no edges.
    """
    r = marginals.r if isinstance(marginals, DirectedMarginals) else np.asarray(marginals, dtype=float)
    if r.shape != (truth.p, truth.p):
        raise DimensionMismatchError(f"scores have shape {r.shape}, truth has p={truth.p}")
    off = ~np.eye(truth.p, dtype=bool)
    scores = r[off]
    labels = truth.adj[off].astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 1.0
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(labels)[ends]
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class MetricReport:
    nshd: float
    f1: float
    ap: float
    runtime_seconds: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    reversals: int = 0
    shd: int = 0
    empty_truth: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def score_prediction(beliefs: EdgeBeliefs, truth: DirectedGraph, runtime: float = 0.0,
                     pred: DirectedGraph | None = None) -> MetricReport:
    pred = map_prediction(beliefs) if pred is None else pred
    return MetricReport(
        nshd=nshd(pred, truth),
        f1=f1(pred, truth),
        ap=average_precision(directed_marginals(beliefs), truth),
        runtime_seconds=runtime,
        shd=shd(pred, truth),
        empty_truth=truth.n_edges == 0,
        **edge_counts(pred, truth),
    )


def timed_predict(params, X) -> tuple[DirectedGraph, float]:
    """MAP graph and the wall time of forward + MAP only."""
    from .encoder import forward

    t0 = time.perf_counter()
    graph = map_prediction(forward(X, params))
    return graph, time.perf_counter() - t0


def _timed_beliefs(model, X) -> tuple[EdgeBeliefs, DirectedGraph, float]:
    from .encoder import EncoderParams, forward

    t0 = time.perf_counter()
    beliefs = forward(X, model) if isinstance(model, EncoderParams) else model(X)
    graph = map_prediction(beliefs)
    return beliefs, graph, time.perf_counter() - t0


@dataclass
class Summary:
    count: int
    mean: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)


METRIC_NAMES = ("nshd", "f1", "ap", "runtime_seconds")


def summarize(reports: Sequence[MetricReport]) -> Summary:
    if not reports:
        raise ValueError("cannot summarize an empty task list")
    out = Summary(count=len(reports), reports=list(reports))
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=float)
        out.mean[name] = float(vals.mean())
        out.stderr[name] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return out


def evaluate(model: object | Callable[[np.ndarray], EdgeBeliefs], tasks: Iterable) -> Summary:
    """Score ``model`` (encoder params, or any ``X -> EdgeBeliefs``) on tasks."""
    reports = []
    for task in tasks:
        beliefs, graph, runtime = _timed_beliefs(model, task.X)
        reports.append(score_prediction(beliefs, task.gstar, runtime, pred=graph))
    return summarize(reports)
