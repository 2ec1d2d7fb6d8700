"""
Training data and configuration types, with their JSON-lines formats.

    retriever pairs:  {"qid", "query", "doc_id", "clicks"}
    mined instances:  {"qid", "query", "pos", "negs": [ids], "clicks"}
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Tuple

from medsearch import constants
from medsearch.exceptions import (
    ConfigurationError,
    InsufficientBatchError,
    InvalidClickCountError,
    InvalidRecordError,
    get_error_context,
)
from medsearch.validation import ConfigDictMixin, InputValidator


logger = logging.getLogger(__name__)

PAIR_FIELDS = ('qid', 'query', 'doc_id', 'clicks')
INSTANCE_FIELDS = ('qid', 'query', 'pos', 'negs', 'clicks')


def _check_clicks(clicks: Any, **context: Any) -> int:
    if isinstance(clicks, bool) or not isinstance(clicks, int) or clicks < 1:
        raise InvalidClickCountError(
            message=f"Click count must be an integer >= 1, got {clicks!r}",
            context=get_error_context(clicks=repr(clicks), **context)
        )
    return clicks


@dataclass(frozen=True)
class ClickPair:
    """(query, clicked article, click count): the retriever's training atom."""
    qid: str
    query: str
    doc_id: str
    clicks: int = 1

    def __post_init__(self):
        _check_clicks(self.clicks, qid=self.qid, doc_id=self.doc_id)

    def to_dict(self) -> Dict[str, Any]:
        return {'qid': self.qid, 'query': self.query, 'doc_id': self.doc_id, 'clicks': self.clicks}


@dataclass(frozen=True)
class RerankInstance:
    """A query with its clicked positive and mined negatives."""
    qid: str
    query: str
    pos: str
    negs: Tuple[str, ...]
    clicks: int = 1

    def __post_init__(self):
        _check_clicks(self.clicks, qid=self.qid, pos=self.pos)
        if self.pos in self.negs:
            raise InvalidRecordError(
                message=f"Positive {self.pos!r} listed among negatives for query {self.qid}",
                context=get_error_context(qid=self.qid, pos=self.pos)
            )

    def to_dict(self) -> Dict[str, Any]:
        return {'qid': self.qid, 'query': self.query, 'pos': self.pos,
                'negs': list(self.negs), 'clicks': self.clicks}


def _check_interval(checkpoint_every: int) -> None:
    if checkpoint_every < 0:
        raise ConfigurationError(
            message=f"checkpoint_every must be >= 0, got {checkpoint_every}",
            context={'checkpoint_every': checkpoint_every}
        )


@dataclass(frozen=True)
class RetrieverTrainConfig(ConfigDictMixin):
    batch_size: int = constants.DEFAULT_BATCH_SIZE
    alpha: float = constants.DEFAULT_ALPHA
    grad_accumulation: int = constants.DEFAULT_GRAD_ACCUMULATION
    steps: int = constants.DEFAULT_RETRIEVER_STEPS
    warmup_steps: int = constants.DEFAULT_RETRIEVER_WARMUP
    learning_rate: float = constants.DEFAULT_LEARNING_RATE
    epsilon: float = constants.ADAM_EPSILON
    log_every: int = constants.DEFAULT_LOG_EVERY
    checkpoint_every: int = constants.DEFAULT_CHECKPOINT_EVERY
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise InsufficientBatchError(
                message=f"Retriever batch size must be >= 2, got {self.batch_size}",
                context={'batch_size': self.batch_size}
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(message=f"alpha must lie in [0, 1], got {self.alpha}", context={'alpha': self.alpha})
        if self.grad_accumulation < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError(
                message="grad_accumulation must be >= 1 and step counts >= 0",
                context={'grad_accumulation': self.grad_accumulation, 'steps': self.steps,
                         'warmup_steps': self.warmup_steps}
            )
        _check_interval(self.checkpoint_every)


@dataclass(frozen=True)
class RerankTrainConfig(ConfigDictMixin):
    num_negatives: int = constants.DEFAULT_NUM_NEGATIVES
    window_start: int = constants.DEFAULT_WINDOW_START
    window_end: int = constants.DEFAULT_WINDOW_END
    batch_size: int = constants.DEFAULT_RERANK_BATCH_SIZE
    steps: int = constants.DEFAULT_RERANKER_STEPS
    warmup_steps: int = constants.DEFAULT_RERANKER_WARMUP
    learning_rate: float = constants.DEFAULT_LEARNING_RATE
    epsilon: float = constants.ADAM_EPSILON
    log_every: int = constants.DEFAULT_LOG_EVERY
    checkpoint_every: int = constants.DEFAULT_CHECKPOINT_EVERY
    seed: int = 0

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ConfigurationError(
                message=f"num_negatives must be >= 1, got {self.num_negatives}",
                context={'num_negatives': self.num_negatives}
            )
        if not 1 <= self.window_start <= self.window_end:
            raise ConfigurationError(
                message=f"Mining window must satisfy 1 <= e <= f, got [{self.window_start}, {self.window_end}]",
                context={'window_start': self.window_start, 'window_end': self.window_end}
            )
        if self.batch_size < 1 or self.steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError(
                message="batch_size must be >= 1 and step counts >= 0",
                context={'batch_size': self.batch_size, 'steps': self.steps}
            )
        _check_interval(self.checkpoint_every)


def _pair_from_record(record: Dict[str, Any], path: Any, line_no: int) -> ClickPair:
    _check_clicks(record['clicks'], path=str(path), line=line_no)
    return ClickPair(str(record['qid']), str(record['query']), str(record['doc_id']), record['clicks'])


def read_pairs(path: Any) -> List[ClickPair]:
    pairs = [_pair_from_record(record, path, line_no)
             for line_no, record in InputValidator.read_jsonl(path, PAIR_FIELDS)]
    logger.info(f"Read {len(pairs)} click pairs from {path}")
    return pairs


def write_pairs(path: Any, pairs: Iterable[ClickPair]) -> int:
    return InputValidator.write_jsonl(path, (pair.to_dict() for pair in pairs))


def read_instances(path: Any) -> List[RerankInstance]:
    instances = []
    for line_no, record in InputValidator.read_jsonl(path, INSTANCE_FIELDS):
        if not isinstance(record['negs'], list):
            raise InvalidRecordError(
                message=f"'negs' must be a list at {path}:{line_no}",
                context=get_error_context(path=path, line=line_no)
            )
        _check_clicks(record['clicks'], path=str(path), line=line_no)
        instances.append(RerankInstance(
            str(record['qid']), str(record['query']), str(record['pos']),
            tuple(str(neg) for neg in record['negs']), record['clicks']
        ))
    logger.info(f"Read {len(instances)} re-rank instances from {path}")
    return instances


def write_instances(path: Any, instances: Iterable[RerankInstance]) -> int:
    return InputValidator.write_jsonl(path, (instance.to_dict() for instance in instances))


def group_by_query(pairs: Iterable[ClickPair]) -> Dict[str, List[ClickPair]]:
    """Pairs grouped per qid, groups in first-seen order."""
    groups: Dict[str, List[ClickPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.qid, []).append(pair)
    return groups
