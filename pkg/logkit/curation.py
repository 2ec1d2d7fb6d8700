"""
Log curation: navigational filter, keyword-query rule, click-pair
extraction and the retriever / re-ranker training-set split.
"""
import logging
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Sequence, Tuple

from medsearch.corpus import Corpus
from medsearch.monitoring import StageTimer
from training.types import ClickPair

from .types import LogRecord


logger = logging.getLogger(__name__)


def filter_navigational(logs: Iterable[LogRecord]) -> List[LogRecord]:
    """Drop navigational records; order of the rest is kept."""
    return [record for record in logs if not record.navigational]


def normalize(text: str) -> str:
    """Lowercased, with whitespace runs collapsed to single spaces."""
    return ' '.join(text.lower().split())


class KeywordRule:
    """
    A query is a keyword query when it has exactly one word, or when every
    clicked article mentions the whole query verbatim in its title or in
    its abstract. A mention is case-insensitive and must start and end on
    word boundaries; punctuation is kept, so "heart damage" does not match
    "heart, damage", and a mention never spans the title/abstract boundary.

    Normalized article fields are cached per article id.
    """

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._fields: Dict[str, Tuple[str, ...]] = {}

    def article_fields(self, article_id: str) -> Tuple[str, ...]:
        fields = self._fields.get(article_id)
        if fields is None:
            article = self.corpus.resolve(article_id, stage='curate')
            fields = tuple(normalize(text) for text in (article.title, article.abstract) if text)
            self._fields[article_id] = fields
        return fields

    def __call__(self, query: str, clicked_ids: Sequence[str]) -> bool:
        phrase = normalize(query)
        # clicked ids are resolved even when the one-word clause decides
        articles = [self.article_fields(article_id) for article_id in clicked_ids]
        if len(phrase.split()) <= 1:
            return True
        mention = re.compile(rf"(?<!\w){re.escape(phrase)}(?!\w)")
        return all(any(mention.search(text) for text in fields) for fields in articles)


def is_keyword_query(record: LogRecord, corpus: Corpus) -> bool:
    return KeywordRule(corpus)(record.query, record.clicked_ids)


def merge_by_query(logs: Iterable[LogRecord]) -> "OrderedDict[str, Tuple[str, List[str]]]":
    """qid -> (query text of first record, clicked ids in first-click order)."""
    merged: "OrderedDict[str, Tuple[str, List[str]]]" = OrderedDict()
    for record in logs:
        query, clicked = merged.setdefault(record.qid, (record.query, []))
        for doc_id in record.clicked_ids:
            if doc_id not in clicked:
                clicked.append(doc_id)
    return merged


def extract_pairs(logs: Iterable[LogRecord]) -> List[ClickPair]:
    """One pair per distinct (qid, article id), clicks summed, sorted by (qid, article id)."""
    totals: Dict[Tuple[str, str], int] = {}
    queries: Dict[str, str] = {}
    for record in logs:
        queries.setdefault(record.qid, record.query)
        for doc_id, count in record.clicks:
            key = (record.qid, doc_id)
            totals[key] = totals.get(key, 0) + count
    return [ClickPair(qid, queries[qid], doc_id, clicks) for (qid, doc_id), clicks in sorted(totals.items())]


def classify_queries(logs: Sequence[LogRecord], corpus: Corpus) -> Dict[str, bool]:
    """qid -> keyword verdict over the union of the query's clicked articles."""
    rule = KeywordRule(corpus)
    return {qid: rule(query, clicked) for qid, (query, clicked) in merge_by_query(logs).items()}


def split_training_sets(logs: Sequence[LogRecord], corpus: Corpus) -> Tuple[List[ClickPair], List[ClickPair]]:
    """
    Retriever pairs from every informational query; re-ranker pairs from the
    queries that fail the keyword rule.
    """
    verdicts = classify_queries(logs, corpus)
    retriever_pairs = extract_pairs(logs)
    reranker_pairs = [pair for pair in retriever_pairs if not verdicts[pair.qid]]
    return retriever_pairs, reranker_pairs


@dataclass
class CurationResult:
    retriever_pairs: List[ClickPair]
    reranker_pairs: List[ClickPair]
    stats: Dict[str, Any] = field(default_factory=dict)


def curate(logs: Sequence[LogRecord], corpus: Corpus) -> CurationResult:
    """filter_navigational -> split_training_sets, with stage counts."""
    with StageTimer('curate') as timer:
        informational = filter_navigational(logs)
        verdicts = classify_queries(informational, corpus)
        retriever_pairs = extract_pairs(informational)
        reranker_pairs = [pair for pair in retriever_pairs if not verdicts[pair.qid]]

        keyword_queries = sum(1 for verdict in verdicts.values() if verdict)
        stats: Dict[str, Any] = {
            'funnel': [
                ['log_records', len(logs)],
                ['informational_records', len(informational)],
                ['retriever_pairs', len(retriever_pairs)],
                ['reranker_pairs', len(reranker_pairs)],
            ],
            'navigational_records': len(logs) - len(informational),
            'informational_queries': len(verdicts),
            'keyword_queries': keyword_queries,
            'nonkeyword_queries': len(verdicts) - keyword_queries,
            'retriever_pairs': len(retriever_pairs),
            'reranker_pairs': len(reranker_pairs),
            'retriever_clicks': sum(pair.clicks for pair in retriever_pairs),
        }
        audit = _audit_kinds(informational, verdicts)
        if audit:
            stats['generator_audit'] = audit
        timer.counts.update({name: value for name, value in stats['funnel']})
    return CurationResult(retriever_pairs, reranker_pairs, stats)


def _audit_kinds(logs: Sequence[LogRecord], verdicts: Dict[str, bool]) -> Dict[str, int]:
    """Count generated queries whose verdict contradicts how they were built."""
    kinds = {record.qid: record.kind for record in logs if record.kind}
    if not kinds:
        return {}
    misclassified = {'keyword': 0, 'nonkeyword': 0}
    for qid, kind in kinds.items():
        if kind == 'keyword' and not verdicts[qid]:
            misclassified['keyword'] += 1
        elif kind == 'nonkeyword' and verdicts[qid]:
            misclassified['nonkeyword'] += 1
    if any(misclassified.values()):
        logger.warning(f"Generated queries classified against their construction: {misclassified}")
    return {'keyword_misclassified': misclassified['keyword'],
            'nonkeyword_misclassified': misclassified['nonkeyword']}
