"""Retrieval protocol and ranking metrics.

A probe bag is summarized by the mean of its extractor features; its
distance to a gallery bag is the minimum Euclidean distance to any
instance feature there. Gallery bags are ranked by that distance (ties
broken by bag id) and scored against instance-level ground truth:
a gallery bag is relevant when the query identity appears among its
instances' truth classes. CMC@r is the fraction of queries whose first
relevant bag lands at rank <= r; mAP averages per-query AP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Bag, CvmimlError, Dataset
from .model import ModelParams, forward_features


class EvaluationError(CvmimlError):
    """Raised when a metric is asked for an unanswerable query set."""


def bag_feature(bag: Bag, params: ModelParams) -> np.ndarray:
    """Mean-pooled extractor feature for a trimmed bag."""
    if len(bag.instances) == 0:
        raise ValueError(f"bag {bag.bag_id!r} has no instances")
    return forward_features(params, bag.feature_matrix()).mean(axis=0)


def bag_distance(query_feature: np.ndarray, bag: Bag, params: ModelParams) -> float:
    """Distance from a pooled query to a gallery bag: min over instances."""
    feats = forward_features(params, bag.feature_matrix())
    return float(np.min(np.linalg.norm(feats - query_feature, axis=1)))


def truth_classes(bag: Bag) -> set[int]:
    return {inst.truth_class for inst in bag.instances if inst.truth_class is not None}


@dataclass(frozen=True)
class RankedResult:
    """One query's gallery ranking with per-position relevance bits."""

    query_id: str
    query_class: int
    ordering: tuple[str, ...]
    distances: tuple[float, ...]
    relevance: tuple[int, ...]

    def first_hit_rank(self) -> int:
        """1-based rank of the first relevant bag."""
        for k, rel in enumerate(self.relevance, start=1):
            if rel:
                return k
        raise EvaluationError(f"query {self.query_id!r} has no relevant gallery bag")

    def num_relevant(self) -> int:
        return int(sum(self.relevance))


def rank_gallery(query: Bag, gallery: list[Bag], params: ModelParams) -> RankedResult:
    """Rank gallery bags for one probe bag by ascending min-distance."""
    if len(query.label) != 1:
        raise ValueError(f"query bag {query.bag_id!r} must carry exactly one class")
    qc = query.label.classes[0]
    qf = bag_feature(query, params)
    scored = sorted(
        ((bag_distance(qf, bag, params), bag.bag_id, bag) for bag in gallery),
        key=lambda t: (t[0], t[1]),
    )
    return RankedResult(
        query_id=query.bag_id,
        query_class=qc,
        ordering=tuple(bid for _, bid, _ in scored),
        distances=tuple(d for d, _, _ in scored),
        relevance=tuple(int(qc in truth_classes(bag)) for _, _, bag in scored),
    )


def cmc(results: list[RankedResult], ranks: tuple[int, ...]) -> dict[int, float]:
    """Fraction of queries whose first relevant bag sits within each rank."""
    if not results:
        raise EvaluationError("no queries to score")
    hits = np.array([r.first_hit_rank() for r in results])
    return {r: float(np.mean(hits <= r)) for r in ranks}


def average_precision(result: RankedResult) -> float:
    """Mean over relevant positions k of (relevant within top-k) / k."""
    ranks = [k for k, rel in enumerate(result.relevance, start=1) if rel]
    if not ranks:
        raise EvaluationError(f"query {result.query_id!r} has no relevant gallery bag")
    return float(np.mean([(j + 1) / k for j, k in enumerate(ranks)]))


def mean_average_precision(results: list[RankedResult]) -> float:
    if not results:
        raise EvaluationError("no queries to score")
    return float(np.mean([average_precision(r) for r in results]))


@dataclass
class EvalOutcome:
    """Metric report plus per-query rows and the full CMC curve."""

    report: dict
    per_query: list[dict]
    curve: tuple[float, ...]


def evaluate(dataset: Dataset, params: ModelParams, ranks: tuple[int, ...] = (1, 5, 10, 20)) -> EvalOutcome:
    """Score every probe bag against the gallery under `params`.

    Queries with no relevant gallery bag are excluded from the metrics
    and listed in the report.
    """
    gallery = list(dataset.gallery)
    if not gallery:
        raise EvaluationError("dataset has no gallery bags")
    results = []
    excluded = []
    for query in dataset.probe:
        res = rank_gallery(query, gallery, params)
        if res.num_relevant() == 0:
            excluded.append(res.query_id)
        else:
            results.append(res)
    if not results:
        raise EvaluationError("every query was excluded (no relevant gallery bags)")
    by_rank = cmc(results, tuple(range(1, len(gallery) + 1)))
    curve = tuple(by_rank[r] for r in range(1, len(gallery) + 1))
    report = {
        "cmc": {str(r): by_rank[min(r, len(gallery))] for r in ranks},
        "map": mean_average_precision(results),
        "num_queries": len(results),
        "excluded": sorted(excluded),
    }
    per_query = [
        {
            "query_id": r.query_id,
            "query_class": r.query_class,
            "first_hit_rank": r.first_hit_rank(),
            "average_precision": average_precision(r),
            "num_relevant": r.num_relevant(),
        }
        for r in results
    ]
    return EvalOutcome(report=report, per_query=per_query, curve=curve)
