"""
Exact flat inner-product index.

Index file layout (little-endian)::

    b'MEDV' | u32 version | u64 N | u32 h | N x (u32 length + UTF-8 id) | N*h f32
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Tuple

import numpy as np

from medsearch.constants import INDEX_MAGIC, INDEX_VERSION
from medsearch.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    DuplicateArticleError,
    IndexFormatError,
    NumericFailureError,
    get_error_context,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedList:
    """Ordered ``(article id, score)`` answers for one query."""
    qid: str
    entries: Tuple[Tuple[str, float], ...] = ()

    def __post_init__(self):
        ids = [doc_id for doc_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(message=f"Ranked list for {self.qid} repeats an article id",
                                     context={'qid': self.qid})
        for (a_id, a_score), (b_id, b_score) in zip(self.entries, self.entries[1:]):
            if b_score > a_score or (b_score == a_score and b_id < a_id):
                raise ConfigurationError(
                    message=f"Ranked list for {self.qid} is not in (score desc, id asc) order at {b_id}",
                    context={'qid': self.qid, 'doc_id': b_id}
                )

    @classmethod
    def from_scores(cls, qid: str, scored: Iterable[Tuple[str, float]], k: int = None) -> 'RankedList':
        ordered = sorted(scored, key=lambda item: (-item[1], item[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(qid, tuple((doc_id, float(score)) for doc_id, score in ordered))

    @property
    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def truncate(self, k: int) -> 'RankedList':
        return RankedList(self.qid, self.entries[:k])


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Corpus vectors ``N x h`` (f32) with the parallel article-id list."""
    ids: Tuple[str, ...]
    values: np.ndarray
    _id_rank: np.ndarray = field(init=False, repr=False, compare=False)
    _positions: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float32, order='C')
        if values.ndim != 2 or values.shape[0] != len(self.ids):
            raise DimensionMismatchError(
                message=f"Matrix with shape {values.shape} does not match {len(self.ids)} ids",
                context={'shape': list(values.shape), 'ids': len(self.ids)}
            )
        if not np.isfinite(values).all():
            raise NumericFailureError(message="Embedding matrix holds non-finite values")
        positions = {}
        for row, article_id in enumerate(self.ids):
            if article_id in positions:
                raise DuplicateArticleError(
                    message=f"Duplicate article id {article_id!r} in embedding matrix",
                    context=get_error_context(article_id=article_id)
                )
            positions[article_id] = row
        values.setflags(write=False)
        id_rank = np.empty(len(self.ids), dtype=np.int64)
        id_rank[np.argsort(np.array(self.ids, dtype=object), kind='stable')] = np.arange(len(self.ids))
        object.__setattr__(self, 'ids', tuple(self.ids))
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, '_id_rank', id_rank)
        object.__setattr__(self, '_positions', positions)

    @classmethod
    def empty(cls, dim: int) -> 'EmbeddingMatrix':
        return cls((), np.zeros((0, dim), dtype=np.float32))

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row(self, article_id: str) -> np.ndarray:
        return self.values[self._positions[article_id]]

    def __contains__(self, article_id: str) -> bool:
        return article_id in self._positions


def concatenate(blocks: Sequence[EmbeddingMatrix], dim: int) -> EmbeddingMatrix:
    if not blocks:
        return EmbeddingMatrix.empty(dim)
    ids = tuple(article_id for block in blocks for article_id in block.ids)
    return EmbeddingMatrix(ids, np.concatenate([block.values for block in blocks], axis=0))


def mips_search(matrix: EmbeddingMatrix, q_vec, k: int, qid: str = '') -> RankedList:
    """
    Exact top-``min(k, N)`` by inner product, ties by ascending article id.
    Scores are accumulated in float64 over the stored f32 values.
    """
    if k < 1:
        raise ConfigurationError(message=f"K must be >= 1, got {k}", context={'k': k})
    q = np.asarray(q_vec, dtype=np.float64).reshape(-1)
    if q.shape[0] != matrix.dim:
        raise DimensionMismatchError(
            message=f"Query dimension {q.shape[0]} does not match index dimension {matrix.dim}",
            context={'query_dim': int(q.shape[0]), 'index_dim': matrix.dim}
        )
    n = matrix.size
    if n == 0:
        return RankedList(qid)
    scores = matrix.values.astype(np.float64) @ q
    k = min(k, n)
    if k < n:
        threshold = np.partition(scores, n - k)[n - k]
        candidates = np.flatnonzero(scores >= threshold)
    else:
        candidates = np.arange(n)
    order = np.lexsort((matrix._id_rank[candidates], -scores[candidates]))[:k]
    rows = candidates[order]
    return RankedList(qid, tuple((matrix.ids[row], float(scores[row])) for row in rows))


def full_ranking(matrix: EmbeddingMatrix, q_vec, qid: str = '') -> RankedList:
    """Every article ranked; used for negative mining."""
    return mips_search(matrix, q_vec, max(1, matrix.size), qid)


def index_bytes(matrix: EmbeddingMatrix) -> bytes:
    parts = [INDEX_MAGIC, struct.pack('<IQI', INDEX_VERSION, matrix.size, matrix.dim)]
    for article_id in matrix.ids:
        encoded = article_id.encode('utf-8')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
    parts.append(matrix.values.astype('<f4', copy=False).tobytes(order='C'))
    return b''.join(parts)


def save_index(matrix: EmbeddingMatrix, path: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(index_bytes(matrix))
    tmp.replace(path)
    logger.info(f"Saved index of {matrix.size} x {matrix.dim} to {path}")
    return path


def load_index(path: Any) -> EmbeddingMatrix:
    """Read an index file; header, id records and payload length are validated."""
    path = Path(path)
    if not path.exists():
        raise IndexFormatError(message=f"Index not found: {path}", context=get_error_context(path=path))
    data = path.read_bytes()
    header_size = 4 + struct.calcsize('<IQI')

    def fail(what: str) -> IndexFormatError:
        return IndexFormatError(message=f"Index {path}: {what}", context=get_error_context(path=path))

    if len(data) < header_size:
        raise fail("truncated header")
    if data[:4] != INDEX_MAGIC:
        raise fail("bad magic")
    version, n, dim = struct.unpack('<IQI', data[4:header_size])
    if version != INDEX_VERSION:
        raise fail(f"unsupported version {version}")
    offset = header_size
    ids: List[str] = []
    for _ in range(n):
        if offset + 4 > len(data):
            raise fail("truncated id records")
        length, = struct.unpack('<I', data[offset:offset + 4])
        offset += 4
        if offset + length > len(data):
            raise fail("truncated id records")
        try:
            ids.append(data[offset:offset + length].decode('utf-8'))
        except UnicodeDecodeError as e:
            raise IndexFormatError(message=f"Index {path}: invalid id bytes",
                                   context=get_error_context(path=path), cause=e)
        offset += length
    payload = n * dim * 4
    if len(data) - offset != payload:
        raise fail(f"expected {payload} payload bytes, found {len(data) - offset}")
    if payload == 0:
        return EmbeddingMatrix(tuple(ids), np.zeros((n, dim), dtype=np.float32))
    values = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
    return EmbeddingMatrix(tuple(ids), values)
