"""
Offline corpus encoding, cross-encoder re-ranking and the composed
retrieve-then-rerank search.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from encoder.network import BiEncoder, CrossEncoder
from encoder.services import EncoderLike, cross_score, doc_encoder, encode_document, encode_text
from encoder.tokenization import document_token_ids, tokenize
from encoder.vocab import Vocabulary
from medsearch import constants
from medsearch.corpus import Article, Corpus
from medsearch.exceptions import ConfigurationError, DuplicateArticleError, IndexFormatError, get_error_context
from medsearch.monitoring import StageTimer

from .index import EmbeddingMatrix, RankedList, concatenate, load_index, mips_search, save_index


logger = logging.getLogger(__name__)


class CorpusEncoder:
    """
    Encodes a corpus into an :class:`EmbeddingMatrix` in fixed-size chunks.

    With a work directory every finished chunk is stored as its own index
    file and reused by later runs whose chunk ids match, so an interrupted
    encode resumes where it stopped. Each row depends only on its article,
    which makes the result independent of chunk size and thread count.
    Chunks are not tied to a model, so a work directory must serve one
    checkpoint only.
    """

    def __init__(self, model: EncoderLike, vocab: Vocabulary,
                 chunk_size: int = constants.DEFAULT_ENCODE_CHUNK_SIZE,
                 work_dir: Optional[Any] = None, threads: int = 1):
        if chunk_size < 1 or threads < 1:
            raise ConfigurationError(
                message="chunk_size and threads must be >= 1",
                context={'chunk_size': chunk_size, 'threads': threads}
            )
        self.model = model
        self.vocab = vocab
        self.chunk_size = chunk_size
        self.work_dir = Path(work_dir) if work_dir else None
        self.threads = threads
        self.dim = doc_encoder(model).config.hidden_size
        self.reused_chunks = 0

    def _chunk_path(self, index: int) -> Optional[Path]:
        if self.work_dir is None:
            return None
        return self.work_dir / f"chunk-{index:06d}.medv"

    def _encode_chunk(self, index: int, articles: Sequence[Article]) -> Tuple[EmbeddingMatrix, bool]:
        """The chunk's rows and whether they came from the work directory."""
        ids = tuple(article.id for article in articles)
        path = self._chunk_path(index)
        if path is not None and path.exists():
            try:
                cached = load_index(path)
            except IndexFormatError:
                logger.warning(f"Discarding unreadable chunk {path}")
            else:
                if cached.ids == ids and cached.dim == self.dim:
                    return cached, True
                logger.warning(f"Chunk {path} does not match the corpus; re-encoding")
        with torch.no_grad():
            rows = [encode_document(self.model, self.vocab, a.title, a.abstract).to(torch.float32).numpy()
                    for a in articles]
        block = EmbeddingMatrix(ids, np.stack(rows) if rows else np.zeros((0, self.dim), dtype=np.float32))
        if path is not None:
            save_index(block, path)
        return block, False

    def encode(self, articles: Sequence[Article]) -> EmbeddingMatrix:
        articles = list(articles)
        seen = set()
        for article in articles:
            if article.id in seen:
                raise DuplicateArticleError(
                    message=f"Duplicate article id {article.id!r} in encode input",
                    context=get_error_context(stage='encode_corpus', article_id=article.id)
                )
            seen.add(article.id)
        chunks = [articles[start:start + self.chunk_size] for start in range(0, len(articles), self.chunk_size)]
        with StageTimer('encode_corpus') as timer:
            if self.threads == 1 or len(chunks) <= 1:
                results = [self._encode_chunk(i, chunk) for i, chunk in enumerate(chunks)]
            else:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    results = list(pool.map(lambda item: self._encode_chunk(*item), enumerate(chunks)))
            # only the calling thread updates the counter
            self.reused_chunks += sum(1 for _, reused in results if reused)
            timer.counts['articles'] = len(articles)
            timer.counts['chunks'] = len(chunks)
            timer.counts['reused_chunks'] = self.reused_chunks
        return concatenate([block for block, _ in results], self.dim)


def encode_corpus(model: EncoderLike, vocab: Vocabulary, articles: Sequence[Article],
                  chunk_size: int = constants.DEFAULT_ENCODE_CHUNK_SIZE,
                  work_dir: Optional[Any] = None, threads: int = 1) -> EmbeddingMatrix:
    """One row per article via the document encoder, in input order."""
    return CorpusEncoder(model, vocab, chunk_size, work_dir, threads).encode(articles)


def encode_queries(model: EncoderLike, vocab: Vocabulary, texts: Sequence[str]) -> np.ndarray:
    """Query vectors as float32 rows."""
    dim = model.config.hidden_size
    if not texts:
        return np.zeros((0, dim), dtype=np.float32)
    with torch.no_grad():
        return np.stack([encode_text(model, vocab, text).to(torch.float32).numpy() for text in texts])


def dense_search(model: EncoderLike, vocab: Vocabulary, matrix: EmbeddingMatrix,
                 query: str, k: int, qid: str = '') -> RankedList:
    """``mips_search`` over ``E(q)``."""
    return mips_search(matrix, encode_queries(model, vocab, [query])[0], k, qid)


class Reranker:
    """Cross-encoder scoring with per-article token caching."""

    def __init__(self, model: CrossEncoder, vocab: Vocabulary, corpus: Corpus):
        self.model = model
        self.vocab = vocab
        self.corpus = corpus
        self._doc_tokens: Dict[str, List[int]] = {}

    def doc_tokens(self, article_id: str) -> List[int]:
        tokens = self._doc_tokens.get(article_id)
        if tokens is None:
            article = self.corpus.resolve(article_id, stage='rerank')
            tokens = document_token_ids(self.vocab, article.title, article.abstract)
            self._doc_tokens[article_id] = tokens
        return tokens

    def scores(self, query: str, article_ids: Sequence[str]) -> List[float]:
        q = tokenize(self.vocab, query, self.model.config.max_query_length)
        doc_tokens = [self.doc_tokens(article_id) for article_id in article_ids]
        with torch.no_grad():
            return [float(cross_score(self.model, q, tokens).item()) for tokens in doc_tokens]

    def rerank(self, query: str, candidates: RankedList) -> RankedList:
        ids = candidates.doc_ids
        return RankedList.from_scores(candidates.qid, zip(ids, self.scores(query, ids)))


def rerank(model: CrossEncoder, vocab: Vocabulary, query: str,
           candidates: RankedList, corpus: Corpus) -> RankedList:
    """Reorder ``candidates`` by cross-encoder score, ties by ascending id."""
    return Reranker(model, vocab, corpus).rerank(query, candidates)


def two_stage_search(query: str, k: int, retriever: BiEncoder, reranker: CrossEncoder,
                     matrix: EmbeddingMatrix, corpus: Corpus, vocab: Vocabulary,
                     qid: str = '') -> RankedList:
    """Retriever top-K, then cross-encoder order; the result set is the top-K set."""
    first_stage = dense_search(retriever, vocab, matrix, query, k, qid)
    return rerank(reranker, vocab, query, first_stage, corpus)


def similar_articles(matrix: EmbeddingMatrix, article_id: str, k: int) -> RankedList:
    """Articles ranked by document-vector inner product with ``article_id``, itself excluded."""
    if article_id not in matrix:
        raise ConfigurationError(
            message=f"Article {article_id!r} is not in the index",
            context=get_error_context(stage='similar_articles', article_id=article_id)
        )
    ranked = mips_search(matrix, matrix.row(article_id), k + 1, qid=article_id)
    entries = tuple(entry for entry in ranked.entries if entry[0] != article_id)[:k]
    return RankedList(article_id, entries)
