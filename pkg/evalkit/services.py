"""
Evaluation reports, sentence similarity and the training-size scaling study.
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import torch

from encoder.network import EncoderConfig
from encoder.services import EncoderLike, encode_text
from encoder.vocab import Vocabulary
from medsearch.corpus import Corpus
from medsearch.exceptions import ConfigurationError, ScalingSizeError
from medsearch.monitoring import StageTimer
from retrieval.index import RankedList
from retrieval.services import dense_search, encode_corpus
from training.services import train_retriever
from training.types import ClickPair, RetrieverTrainConfig

from .metrics import METRICS, MetricResult, pearson
from .trec import Qrels, Run


logger = logging.getLogger(__name__)

SIMILARITY_METRICS = ('dot', 'cosine')


@dataclass
class EvaluationReport:
    results: List[MetricResult] = field(default_factory=list)

    def rows(self) -> List[Tuple[str, int, float, int]]:
        return [(r.metric, r.k, r.mean, len(r.per_query)) for r in self.results]

    def get(self, metric: str, k: int) -> MetricResult:
        for result in self.results:
            if result.metric == metric and result.k == k:
                return result
        raise KeyError((metric, k))

    def write(self, path: Any, per_query_path: Optional[Any] = None) -> Path:
        """
        Summary CSV (metric, k, mean, queries, per_query_file) and, when
        ``per_query_path`` is given, the per-query CSV (metric, k, qid, score).
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        reference = Path(per_query_path).name if per_query_path else ''
        with path.open('w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(['metric', 'k', 'mean', 'queries', 'per_query_file'])
            for metric, k, mean, queries in self.rows():
                writer.writerow([metric, k, repr(mean), queries, reference])
        if per_query_path:
            with Path(per_query_path).open('w', encoding='utf-8', newline='') as handle:
                writer = csv.writer(handle, lineterminator='\n')
                writer.writerow(['metric', 'k', 'qid', 'score'])
                for result in self.results:
                    for qid in sorted(result.per_query):
                        writer.writerow([result.metric, result.k, qid, repr(result.per_query[qid])])
        return path


def evaluate(run: Mapping[str, RankedList], qrels: Qrels, ks: Sequence[int],
             metrics: Sequence[str] = ('ndcg', 'map')) -> EvaluationReport:
    unknown = [name for name in metrics if name not in METRICS]
    if unknown:
        raise ConfigurationError(message=f"Unknown metrics: {', '.join(unknown)}", context={'unknown': unknown})
    report = EvaluationReport()
    for name in metrics:
        for k in ks:
            report.results.append(METRICS[name](run, qrels, k))
    return report


def sentence_similarity(model: EncoderLike, vocab: Vocabulary, s1: str, s2: str, metric: str = 'dot') -> float:
    """``E(s1)^T E(s2)`` with the query encoder; ``metric='cosine'`` normalises both vectors."""
    if metric not in SIMILARITY_METRICS:
        raise ConfigurationError(message=f"Unknown similarity metric {metric!r}", context={'metric': metric})
    with torch.no_grad():
        a = encode_text(model, vocab, s1).double()
        b = encode_text(model, vocab, s2).double()
        if metric == 'cosine':
            return float(torch.nn.functional.cosine_similarity(a, b, dim=0).item())
        return float(a @ b)


def similarity_correlation(model: EncoderLike, vocab: Vocabulary,
                           rows: Iterable[Tuple[str, str, float]], metric: str = 'dot') -> Tuple[float, List[float]]:
    """Pearson r between model similarities and gold scores; also returns the predictions."""
    rows = list(rows)
    predictions = [sentence_similarity(model, vocab, s1, s2, metric) for s1, s2, _ in rows]
    return pearson(predictions, [gold for _, _, gold in rows]), predictions


def validate_sizes(sizes: Sequence[int], available: int) -> List[int]:
    sizes = list(sizes)
    if not sizes:
        raise ScalingSizeError(message="At least one size is required")
    # a retriever batch needs one in-batch negative per pair
    if any(size < 2 for size in sizes):
        raise ScalingSizeError(message="Sizes must be at least 2", context={'sizes': sizes})
    if len(set(sizes)) != len(sizes):
        raise ScalingSizeError(message="Sizes must not repeat", context={'sizes': sizes})
    if sizes != sorted(sizes):
        raise ScalingSizeError(message="Sizes must be ascending", context={'sizes': sizes})
    if sizes[-1] > available:
        raise ScalingSizeError(
            message=f"Size {sizes[-1]} exceeds the {available} available pairs",
            context={'sizes': sizes, 'available': available}
        )
    return sizes


def dense_run(model: EncoderLike, vocab: Vocabulary, matrix, queries: Sequence[Tuple[str, str]], k: int) -> Run:
    return Run(dense_search(model, vocab, matrix, text, k, qid) for qid, text in queries)


def scaling_curve(pairs: Sequence[ClickPair], sizes: Sequence[int], corpus: Corpus, vocab: Vocabulary,
                  encoder_config: EncoderConfig, train_config: RetrieverTrainConfig,
                  queries: Sequence[Tuple[str, str]], qrels: Qrels, k: int = 10,
                  threads: int = 1) -> List[Tuple[int, float]]:
    """
    Train one retriever per prefix of ``pairs`` (same seeds, same step
    budget) and report NDCG@k of each on the shared held-out queries.
    """
    sizes = validate_sizes(sizes, len(pairs))
    rows: List[Tuple[int, float]] = []
    for size in sizes:
        with StageTimer(f"scaling_curve[{size}]"):
            prefix = list(pairs[:size])
            if len(prefix) < train_config.batch_size:
                config = replace(train_config, batch_size=max(2, len(prefix)))
                logger.warning(f"Batch size reduced to {config.batch_size} for {size} pairs")
            else:
                config = train_config
            model = train_retriever(prefix, corpus, vocab, encoder_config, config).model
            matrix = encode_corpus(model, vocab, corpus.articles(), threads=threads)
            score = METRICS['ndcg'](dense_run(model, vocab, matrix, queries, k), qrels, k).mean
        logger.info(f"scaling curve: {size} pairs -> NDCG@{k} {score:.4f}")
        rows.append((size, score))
    return rows


def write_scaling_curve(path: Any, rows: Sequence[Tuple[int, float]], k: int = 10) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['pairs', f'ndcg@{k}'])
        for size, score in rows:
            writer.writerow([size, repr(score)])
    return path
