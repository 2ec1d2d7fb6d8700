"""
BM25 lexical baseline.

    score(q, d) = sum_{t in q} idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avglen))
    idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))

Query terms are taken as a multiset; documents are title + abstract under
the encoder's word tokenizer.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from encoder.vocab import split_words
from medsearch import constants
from medsearch.corpus import Article
from medsearch.exceptions import ConfigurationError, EmptyCorpusError
from retrieval.index import RankedList


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bm25Config:
    k1: float = constants.DEFAULT_BM25_K1
    b: float = constants.DEFAULT_BM25_B

    def __post_init__(self):
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ConfigurationError(message="BM25 needs k1 >= 0 and 0 <= b <= 1",
                                     context={'k1': self.k1, 'b': self.b})


class Bm25Index:
    """Corpus statistics and an inverted index of term frequencies."""

    def __init__(self, articles: Sequence[Article], config: Bm25Config = Bm25Config()):
        if not articles:
            raise EmptyCorpusError(message="BM25 needs a non-empty corpus")
        self.config = config
        self.ids: List[str] = [article.id for article in articles]
        self.doc_lengths = np.zeros(len(articles), dtype=np.float64)
        self.postings: Dict[str, Dict[int, int]] = {}
        for row, article in enumerate(articles):
            terms = split_words(article.text)
            self.doc_lengths[row] = len(terms)
            for term, tf in Counter(terms).items():
                self.postings.setdefault(term, {})[row] = tf
        self.num_docs = len(articles)
        self.avg_length = float(self.doc_lengths.mean())
        self._id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=object), kind='stable'), kind='stable')
        logger.info(f"BM25 index over {self.num_docs} documents, {len(self.postings)} terms")

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, {}))

    def idf(self, term: str) -> float:
        df = self.document_frequency(term)
        return math.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))

    def scores(self, query: str) -> np.ndarray:
        k1, b = self.config.k1, self.config.b
        avg = self.avg_length or 1.0
        norm = k1 * (1.0 - b + b * self.doc_lengths / avg)
        scores = np.zeros(self.num_docs, dtype=np.float64)
        for term in split_words(query):
            postings = self.postings.get(term)
            if not postings:
                continue
            idf = self.idf(term)
            for row, tf in postings.items():
                scores[row] += idf * tf * (k1 + 1.0) / (tf + norm[row])
        return scores

    def rank(self, query: str, k: int, qid: str = '') -> RankedList:
        if k < 1:
            raise ConfigurationError(message=f"K must be >= 1, got {k}", context={'k': k})
        scores = self.scores(query)
        order = np.lexsort((self._id_rank, -scores))[:k]
        return RankedList(qid, tuple((self.ids[row], float(scores[row])) for row in order))


def bm25_rank(query: str, articles: Sequence[Article], config: Bm25Config, k: int, qid: str = '') -> RankedList:
    """One-off BM25 ranking; build a :class:`Bm25Index` to rank many queries."""
    return Bm25Index(articles, config).rank(query, k, qid)
