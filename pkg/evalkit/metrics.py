"""
Ranking and correlation metrics.

NDCG uses gain ``2^grade - 1`` and discount ``log2(rank + 1)``; MAP uses
binary relevance (grade > 0) normalised by ``min(k, #relevant)``. Queries
without a positive judgment are left out of the mean; judged queries
missing from the run score 0.
"""
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np

from medsearch.exceptions import ConfigurationError, EmptyQrelsError, UndefinedCorrelationError
from retrieval.index import RankedList

from .trec import Qrels


@dataclass(frozen=True)
class MetricResult:
    metric: str
    k: int
    per_query: Dict[str, float]

    @property
    def mean(self) -> float:
        return math.fsum(self.per_query.values()) / len(self.per_query)


def _judged(qrels: Qrels, k: int):
    if k < 1:
        raise ConfigurationError(message=f"k must be >= 1, got {k}", context={'k': k})
    queries = qrels.judged_queries()
    if not queries:
        raise EmptyQrelsError(message="Qrels hold no query with a positive judgment")
    return queries


def dcg(grades: Sequence[int]) -> float:
    return math.fsum((2.0 ** grade - 1.0) / math.log2(rank + 1) for rank, grade in enumerate(grades, start=1))


def query_ndcg(ranked: RankedList, grades: Mapping[str, int], k: int) -> float:
    ideal = dcg(sorted(grades.values(), reverse=True)[:k])
    if ideal == 0:
        return 0.0
    return dcg([grades.get(doc_id, 0) for doc_id in ranked.doc_ids[:k]]) / ideal


def query_average_precision(ranked: RankedList, grades: Mapping[str, int], k: int) -> float:
    relevant = sum(1 for grade in grades.values() if grade > 0)
    hits, precisions = 0, []
    for rank, doc_id in enumerate(ranked.doc_ids[:k], start=1):
        if grades.get(doc_id, 0) > 0:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / min(k, relevant)


def ndcg_at_k(run: Mapping[str, RankedList], qrels: Qrels, k: int) -> MetricResult:
    per_query = {
        qid: query_ndcg(run[qid], qrels[qid], k) if qid in run else 0.0
        for qid in _judged(qrels, k)
    }
    return MetricResult('ndcg', k, per_query)


def map_at_k(run: Mapping[str, RankedList], qrels: Qrels, k: int) -> MetricResult:
    per_query = {
        qid: query_average_precision(run[qid], qrels[qid], k) if qid in run else 0.0
        for qid in _judged(qrels, k)
    }
    return MetricResult('map', k, per_query)


METRICS = {
    'ndcg': ndcg_at_k,
    'map': map_at_k,
}


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ConfigurationError(message="pearson needs two equal-length lists of at least two values",
                                 context={'x': list(a.shape), 'y': list(b.shape)})
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError(message="Correlation is undefined when one input is constant")
    return max(-1.0, min(1.0, float(da @ db) / (sa * sb)))
